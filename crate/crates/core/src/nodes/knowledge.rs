use serde_json::json;

use super::{cfg_str, cfg_u64, input, tool_spec, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::memory::SharedKnowledgeBase;
use crate::protocol::{ConfigField, Document, NodeSpec, PortSchema, Value, ValueKind};

/// Top-k retrieval over the knowledge base.
pub struct KnowledgeSearch {
    kb: SharedKnowledgeBase,
}

impl KnowledgeSearch {
    pub const TYPE_ID: &'static str = "knowledge.search";

    pub fn new(kb: SharedKnowledgeBase) -> Self {
        KnowledgeSearch { kb }
    }

    pub fn spec() -> NodeSpec {
        tool_spec(
            Self::TYPE_ID,
            "Searches domain knowledge documents and returns the most similar snippets with scores",
            vec![PortSchema::input("query", ValueKind::Text, "The natural language question", true)],
            vec![PortSchema::output("snippets", ValueKind::Document, "Ranked snippets with similarity scores")],
            vec![
                ConfigField::new("k", ValueKind::Integer, "Number of snippets to return").with_default(json!(3)),
                ConfigField::new("collection", ValueKind::Text, "Restrict to one knowledge collection (empty = all)")
                    .with_default(json!("")),
            ],
        )
    }
}

impl ToolNode for KnowledgeSearch {
    fn execute(&self, _ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let query = match input(inputs, "query")? {
            Value::Text(q) => q.as_str(),
            other => return Err(NodeError::InvalidConfig(format!("query must be text, got {}", other.kind()))),
        };
        let k = cfg_u64(config, "k")? as usize;
        let collection = cfg_str(config, "collection")?;
        let filter = (!collection.is_empty()).then_some(collection);

        let kb = self.kb.read();
        let hits = if k == 0 { Vec::new() } else { kb.search_knowledge(query, k, filter) };
        let mut body = String::new();
        let mut snippets = Vec::with_capacity(hits.len());
        for hit in &hits {
            let doc = kb.document(&hit.doc_id).expect("hits reference stored documents");
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(&format!("[{:.4}] {}: {}", hit.score, hit.doc_id, doc.text));
            snippets.push(json!({
                "doc_id": hit.doc_id,
                "score": hit.score,
                "collection": doc.collection,
                "text": doc.text,
            }));
        }
        let document = Document {
            body,
            metadata: [
                ("query".to_string(), json!(query)),
                ("snippets".to_string(), json!(snippets)),
            ]
            .into_iter()
            .collect(),
        };
        Ok(PortMap::from([("snippets".to_string(), Value::Document(document))]))
    }
}

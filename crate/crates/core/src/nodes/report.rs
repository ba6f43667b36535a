use serde_json::json;

use super::{cfg_str, tool_spec, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::protocol::{ConfigField, NodeSpec, PortSchema, Report, ReportSection, Scalar, Value, ValueKind};

/// Assembles bound sections into a report, in input-port declaration order.
pub struct ReportRender;

impl ReportRender {
    pub const TYPE_ID: &'static str = "report.render";

    pub fn spec() -> NodeSpec {
        let mut spec = tool_spec(
            Self::TYPE_ID,
            "Synthesizes tables, charts and documents into an analytical report",
            vec![
                PortSchema::input("summary", ValueKind::Document, "Narrative summary section", false),
                PortSchema::input("table", ValueKind::Table, "Tabular result rendered as a grid", false),
                PortSchema::input("chart", ValueKind::ChartSpec, "Chart embedded by reference", false),
                PortSchema::input("context", ValueKind::Document, "Supporting domain knowledge", false),
            ],
            vec![PortSchema::output("report", ValueKind::Report, "The rendered analytical report")],
            vec![ConfigField::new("title", ValueKind::Text, "Report title").with_default(json!("Analysis Report"))],
        );
        spec.terminal = true;
        spec
    }
}

impl ToolNode for ReportRender {
    fn execute(&self, ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let mut sections = Vec::new();
        for port in Self::spec().inputs {
            let Some(value) = inputs.get(&port.key) else { continue };
            let section = match value {
                Value::Document(d) => ReportSection::Text { port: port.key.clone(), body: d.body.clone() },
                Value::Table(t) => ReportSection::Grid {
                    port: port.key.clone(),
                    columns: t.columns.clone(),
                    rows: t.rows.iter().map(|r| r.iter().map(Scalar::render).collect()).collect(),
                },
                Value::ChartSpec(c) => ReportSection::Chart {
                    port: port.key.clone(),
                    chart_ref: ctx
                        .input_artifacts
                        .get(&port.key)
                        .cloned()
                        .unwrap_or_else(|| format!("inline:{}", port.key)),
                    title: c.title.clone(),
                },
                other => {
                    return Err(NodeError::InvalidConfig(format!(
                        "port {} cannot render a {} value",
                        port.key,
                        other.kind()
                    )))
                }
            };
            sections.push(section);
        }
        if sections.is_empty() {
            return Err(NodeError::EmptyReport);
        }
        let report = Report { title: cfg_str(config, "title")?.to_string(), sections };
        Ok(PortMap::from([("report".to_string(), Value::Report(report))]))
    }
}

use std::sync::Arc;

use serde_json::json;

use super::{cfg_str, input, tool_spec, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::catalog::{SourceCatalog, SourceKind};
use crate::protocol::{ConfigField, NodeSpec, PortSchema, Scalar, Table, Value, ValueKind};

/// Reads a registered CSV source into a table.
pub struct DatasourceRead {
    catalog: Arc<SourceCatalog>,
}

impl DatasourceRead {
    pub const TYPE_ID: &'static str = "datasource.read";

    pub fn new(catalog: Arc<SourceCatalog>) -> Self {
        DatasourceRead { catalog }
    }

    pub fn spec() -> NodeSpec {
        tool_spec(
            Self::TYPE_ID,
            "Reads a registered data source (CSV file) into a table with header-derived columns",
            vec![PortSchema::input(
                "source",
                ValueKind::Text,
                "Name of the registered data source to read",
                true,
            )],
            vec![PortSchema::output("rows", ValueKind::Table, "All rows of the source, in file order")],
            vec![ConfigField::new("format", ValueKind::Text, "Source file format").with_default(json!("csv"))],
        )
    }
}

impl ToolNode for DatasourceRead {
    fn execute(&self, _ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let format = cfg_str(config, "format")?;
        if format != "csv" {
            return Err(NodeError::InvalidConfig(format!("unsupported format {format:?}")));
        }
        let name = match input(inputs, "source")? {
            Value::Text(s) => s.as_str(),
            other => {
                return Err(NodeError::InvalidConfig(format!("source must be text, got {}", other.kind())))
            }
        };
        let reg = self
            .catalog
            .get(name)
            .or_else(|| self.catalog.find_by_path(name))
            .filter(|r| r.kind == SourceKind::Csv)
            .ok_or_else(|| NodeError::SourceNotRegistered(name.to_string()))?;
        let path = reg.path.as_ref().ok_or_else(|| NodeError::SourceNotRegistered(name.to_string()))?;
        let bytes = std::fs::read(path).map_err(|e| NodeError::Io(format!("{}: {e}", path.display())))?;
        let table = parse_csv(&bytes)?;
        Ok(PortMap::from([("rows".to_string(), Value::Table(table))]))
    }
}

/// Parses CSV bytes. Numeric-looking cells become numbers, empty cells null,
/// everything else text.
pub fn parse_csv(bytes: &[u8]) -> Result<Table, NodeError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(NodeError::ParseError { line: 1, message: "no header".into() });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(e, i as u64 + 2))?;
        rows.push(record.iter().map(parse_cell).collect());
    }
    let table = Table::new(headers, rows);
    table
        .check_shape()
        .map_err(|message| NodeError::ParseError { line: 1, message })?;
    Ok(table)
}

fn parse_cell(raw: &str) -> Scalar {
    let cell = raw.trim();
    if cell.is_empty() {
        return Scalar::Null;
    }
    match cell.parse::<f64>() {
        Ok(n) if n.is_finite() && cell.bytes().any(|b| b.is_ascii_digit()) => Scalar::Number(n),
        _ => Scalar::Text(cell.to_string()),
    }
}

fn csv_error(err: csv::Error, fallback_line: u64) -> NodeError {
    let line = err.position().map(|p| p.line()).unwrap_or(fallback_line);
    NodeError::ParseError { line, message: err.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::SourceRegistration;

    #[test]
    fn parses_header_and_kinds() {
        let t = parse_csv(b"region,amt\nEU,10\nUS,20").unwrap();
        assert_eq!(t.columns, vec!["region", "amt"]);
        assert_eq!(
            t.rows,
            vec![
                vec![Scalar::Text("EU".into()), Scalar::Number(10.0)],
                vec![Scalar::Text("US".into()), Scalar::Number(20.0)],
            ]
        );
        assert!(!t.is_numeric_column(0));
        assert!(t.is_numeric_column(1));
    }

    #[test]
    fn empty_file_has_no_header() {
        assert_eq!(
            parse_csv(b""),
            Err(NodeError::ParseError { line: 1, message: "no header".into() })
        );
    }

    #[test]
    fn ragged_row_reports_line() {
        match parse_csv(b"a,b\n1,2\n3\n") {
            Err(NodeError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_and_inf_stay_text() {
        let t = parse_csv(b"a\nNaN\ninf\n1e3").unwrap();
        assert_eq!(t.rows[0][0], Scalar::Text("NaN".into()));
        assert_eq!(t.rows[1][0], Scalar::Text("inf".into()));
        assert_eq!(t.rows[2][0], Scalar::Number(1000.0));
    }

    #[test]
    fn reads_registered_source_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sales.csv");
        std::fs::write(&path, "region,amt\nEU,10\nUS,20").unwrap();
        let catalog = Arc::new(SourceCatalog::new());
        catalog.register(SourceRegistration::csv("sales_db", path)).unwrap();
        let tool = DatasourceRead::new(catalog);
        let inputs = PortMap::from([("source".to_string(), Value::text("sales_db"))]);
        let config = ConfigMap::from([("format".to_string(), json!("csv"))]);
        let ctx = NodeContext::new("r", "n", 1);
        let a = tool.execute(&ctx, &inputs, &config).unwrap();
        let b = tool.execute(&ctx, &inputs, &config).unwrap();
        assert_eq!(a, b);
        match &a["rows"] {
            Value::Table(t) => assert_eq!(t.rows.len(), 2),
            other => panic!("unexpected {other:?}"),
        }

        let missing = PortMap::from([("source".to_string(), Value::text("nope"))]);
        assert_eq!(
            tool.execute(&ctx, &missing, &config),
            Err(NodeError::SourceNotRegistered("nope".into()))
        );
    }
}

use serde_json::json;

use super::{cfg_str, input, tool_spec, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::protocol::{
    ChartMark, ChartSpec, ConfigField, Encoding, NodeSpec, PortSchema, Value, ValueKind,
};

/// Builds a declarative chart spec (the dashboard surrogate).
pub struct ChartSpecTool;

impl ChartSpecTool {
    pub const TYPE_ID: &'static str = "chart.spec";

    pub fn spec() -> NodeSpec {
        tool_spec(
            Self::TYPE_ID,
            "Generates a bar, line or pie chart specification from a table",
            vec![PortSchema::input("data", ValueKind::Table, "Table holding the plotted columns", true)],
            vec![PortSchema::output("chart", ValueKind::ChartSpec, "Chart specification with inlined data")],
            vec![
                ConfigField::new("chart_type", ValueKind::Text, "One of bar, line, pie").with_default(json!("bar")),
                ConfigField::new("x", ValueKind::Text, "Category / x-axis column"),
                ConfigField::new("y", ValueKind::Text, "Numeric value / y-axis column"),
                ConfigField::new("title", ValueKind::Text, "Chart title").with_default(json!("")),
            ],
        )
    }
}

impl ToolNode for ChartSpecTool {
    fn execute(&self, _ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let table = match input(inputs, "data")? {
            Value::Table(t) => t,
            other => return Err(NodeError::InvalidConfig(format!("data must be a table, got {}", other.kind()))),
        };
        let mark = match cfg_str(config, "chart_type")? {
            "bar" => ChartMark::Bar,
            "line" => ChartMark::Line,
            "pie" => ChartMark::Pie,
            other => return Err(NodeError::InvalidConfig(format!("unsupported chart_type {other:?}"))),
        };
        let x = cfg_str(config, "x")?;
        let y = cfg_str(config, "y")?;
        let x_idx = table.column_index(x).ok_or_else(|| NodeError::UnknownColumn(x.to_string()))?;
        let y_idx = table.column_index(y).ok_or_else(|| NodeError::UnknownColumn(y.to_string()))?;
        if !table.is_numeric_column(y_idx) {
            return Err(NodeError::TypeError { column: y.to_string(), expected: ValueKind::Number });
        }
        let x_kind = if table.is_numeric_column(x_idx) && !table.rows.is_empty() {
            "quantitative"
        } else {
            "nominal"
        };
        let chart = ChartSpec {
            mark,
            title: cfg_str(config, "title")?.to_string(),
            x: Encoding { field: x.to_string(), kind: x_kind.to_string() },
            y: Encoding { field: y.to_string(), kind: "quantitative".to_string() },
            data: table.clone(),
        };
        Ok(PortMap::from([("chart".to_string(), Value::ChartSpec(chart))]))
    }
}

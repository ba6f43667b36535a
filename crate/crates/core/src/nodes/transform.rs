use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{cfg_str, input, tool_spec, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::protocol::{ConfigField, Document, NodeSpec, PortSchema, Scalar, Table, Value, ValueKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub column: String,
    pub op: CmpOp,
    pub value: Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggOp {
    Sum,
    Count,
    Avg,
    Min,
    Max,
}

impl AggOp {
    fn name(self) -> &'static str {
        match self {
            AggOp::Sum => "sum",
            AggOp::Count => "count",
            AggOp::Avg => "avg",
            AggOp::Min => "min",
            AggOp::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    pub op: AggOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(rename = "as", default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl Aggregation {
    /// Output column name: the alias, else `<op>_<column>`, else `count`.
    pub fn output_name(&self) -> String {
        match (&self.alias, &self.column) {
            (Some(a), _) => a.clone(),
            (None, Some(c)) => format!("{}_{c}", self.op.name()),
            (None, None) => self.op.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortKey {
    pub column: String,
    #[serde(default)]
    pub descending: bool,
}

/// Transform applied in the fixed order filter → group/aggregate → sort → limit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    #[serde(default)]
    pub filter: Vec<Predicate>,
    #[serde(default)]
    pub group_by: Vec<String>,
    #[serde(default)]
    pub aggregations: Vec<Aggregation>,
    #[serde(default)]
    pub sort: Option<SortKey>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl TransformSpec {
    pub fn from_config(config: &ConfigMap) -> Result<Self, NodeError> {
        let field = |k: &str| config.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let null_to = |v: serde_json::Value, d: serde_json::Value| if v.is_null() { d } else { v };
        let raw = json!({
            "filter": null_to(field("filter"), json!([])),
            "group_by": null_to(field("group_by"), json!([])),
            "aggregations": null_to(field("aggregations"), json!([])),
            "sort": field("sort"),
            "limit": field("limit"),
        });
        serde_json::from_value(raw).map_err(|e| NodeError::InvalidConfig(e.to_string()))
    }
}

pub struct TableTransform;

impl TableTransform {
    pub const TYPE_ID: &'static str = "table.transform";

    pub fn spec() -> NodeSpec {
        tool_spec(
            Self::TYPE_ID,
            "Filters, groups, aggregates (sum, count, avg, min, max), sorts and limits a table",
            vec![PortSchema::input("data", ValueKind::Table, "Table to transform", true)],
            vec![PortSchema::output("rows", ValueKind::Table, "Transformed rows")
                .with_kind_from_config("output_kind")],
            vec![
                ConfigField::new("filter", ValueKind::Dynamic, "List of {column, op, value} predicates, all must hold")
                    .with_default(json!([])),
                ConfigField::new("group_by", ValueKind::Dynamic, "Grouping column names").with_default(json!([])),
                ConfigField::new("aggregations", ValueKind::Dynamic, "List of {op, column, as} aggregations")
                    .with_default(json!([])),
                ConfigField::new("sort", ValueKind::Dynamic, "Optional {column, descending} sort key")
                    .with_default(json!(null)),
                ConfigField::new("limit", ValueKind::Integer, "Optional maximum row count").with_default(json!(null)),
                ConfigField::new("output_kind", ValueKind::Text, "Emit the result as table, text (CSV) or document")
                    .with_default(json!("table")),
            ],
        )
    }
}

impl ToolNode for TableTransform {
    fn execute(&self, _ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let table = match input(inputs, "data")? {
            Value::Table(t) => t,
            other => return Err(NodeError::InvalidConfig(format!("data must be a table, got {}", other.kind()))),
        };
        let spec = TransformSpec::from_config(config)?;
        let out = apply_transform(table, &spec)?;
        let value = match cfg_str(config, "output_kind")? {
            "table" => Value::Table(out),
            "text" => Value::Text(out.to_csv()),
            "document" => Value::Document(Document {
                body: out.to_csv(),
                metadata: [("columns".to_string(), json!(out.columns))].into_iter().collect(),
            }),
            other => return Err(NodeError::InvalidConfig(format!("unsupported output_kind {other:?}"))),
        };
        Ok(PortMap::from([("rows".to_string(), value)]))
    }
}

fn column(table: &Table, name: &str) -> Result<usize, NodeError> {
    table.column_index(name).ok_or_else(|| NodeError::UnknownColumn(name.to_string()))
}

fn numeric_column(table: &Table, name: &str) -> Result<usize, NodeError> {
    let idx = column(table, name)?;
    if table.is_numeric_column(idx) {
        Ok(idx)
    } else {
        Err(NodeError::TypeError { column: name.to_string(), expected: ValueKind::Number })
    }
}

fn type_rank(s: &Scalar) -> u8 {
    match s {
        Scalar::Null => 0,
        Scalar::Boolean(_) => 1,
        Scalar::Number(_) => 2,
        Scalar::Text(_) => 3,
    }
}

/// Total order over cells: null < boolean < number < text.
pub(crate) fn compare_scalars(a: &Scalar, b: &Scalar) -> Ordering {
    match (a, b) {
        (Scalar::Boolean(x), Scalar::Boolean(y)) => x.cmp(y),
        (Scalar::Number(x), Scalar::Number(y)) => x.total_cmp(y),
        (Scalar::Text(x), Scalar::Text(y)) => x.cmp(y),
        _ => type_rank(a).cmp(&type_rank(b)),
    }
}

fn matches(cell: &Scalar, op: CmpOp, value: &Scalar) -> bool {
    match op {
        CmpOp::Eq => cell == value,
        CmpOp::Ne => cell != value,
        _ => {
            if matches!(cell, Scalar::Null) || type_rank(cell) != type_rank(value) {
                return false;
            }
            let ord = compare_scalars(cell, value);
            match op {
                CmpOp::Lt => ord == Ordering::Less,
                CmpOp::Le => ord != Ordering::Greater,
                CmpOp::Gt => ord == Ordering::Greater,
                CmpOp::Ge => ord != Ordering::Less,
                CmpOp::Eq | CmpOp::Ne => unreachable!(),
            }
        }
    }
}

fn aggregate(op: AggOp, cells: &[&Scalar]) -> Scalar {
    let nums = cells.iter().filter_map(|c| c.as_f64());
    match op {
        AggOp::Count => Scalar::Number(cells.iter().filter(|c| !matches!(c, Scalar::Null)).count() as f64),
        AggOp::Sum => Scalar::Number(nums.sum()),
        AggOp::Avg => {
            let v: Vec<f64> = nums.collect();
            if v.is_empty() {
                Scalar::Null
            } else {
                Scalar::Number(v.iter().sum::<f64>() / v.len() as f64)
            }
        }
        AggOp::Min => nums.reduce(f64::min).map(Scalar::Number).unwrap_or(Scalar::Null),
        AggOp::Max => nums.reduce(f64::max).map(Scalar::Number).unwrap_or(Scalar::Null),
    }
}

/// Applies a transform. Groups keep first-occurrence order; sorting is stable.
pub fn apply_transform(table: &Table, spec: &TransformSpec) -> Result<Table, NodeError> {
    table.check_shape().map_err(NodeError::InvalidConfig)?;

    // filter
    let mut preds = Vec::with_capacity(spec.filter.len());
    for p in &spec.filter {
        let idx = column(table, &p.column)?;
        let ordering = !matches!(p.op, CmpOp::Eq | CmpOp::Ne);
        if ordering && matches!(p.value, Scalar::Number(_)) && !table.is_numeric_column(idx) {
            return Err(NodeError::TypeError { column: p.column.clone(), expected: ValueKind::Number });
        }
        preds.push((idx, p));
    }
    let rows: Vec<&Vec<Scalar>> = table
        .rows
        .iter()
        .filter(|row| preds.iter().all(|(idx, p)| matches(&row[*idx], p.op, &p.value)))
        .collect();

    // group / aggregate
    let mut out = if spec.group_by.is_empty() && spec.aggregations.is_empty() {
        Table::new(table.columns.clone(), rows.into_iter().cloned().collect())
    } else {
        let group_idx = spec.group_by.iter().map(|g| column(table, g)).collect::<Result<Vec<_>, _>>()?;
        let mut agg_idx = Vec::with_capacity(spec.aggregations.len());
        for agg in &spec.aggregations {
            let idx = match (&agg.column, agg.op) {
                (None, AggOp::Count) => None,
                (None, _) => {
                    return Err(NodeError::InvalidConfig(format!("{} needs a column", agg.op.name())))
                }
                (Some(c), AggOp::Count) => Some(column(table, c)?),
                (Some(c), _) => Some(numeric_column(table, c)?),
            };
            agg_idx.push(idx);
        }
        let mut columns: Vec<String> = spec.group_by.clone();
        columns.extend(spec.aggregations.iter().map(Aggregation::output_name));

        // group key → member rows, in first-occurrence order
        let mut groups: Vec<(Vec<Scalar>, Vec<&Vec<Scalar>>)> = Vec::new();
        if group_idx.is_empty() {
            groups.push((Vec::new(), rows));
        } else {
            for row in rows {
                let key: Vec<Scalar> = group_idx.iter().map(|i| row[*i].clone()).collect();
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, members)) => members.push(row),
                    None => groups.push((key, vec![row])),
                }
            }
        }
        let out_rows = groups
            .into_iter()
            .map(|(mut key, members)| {
                for (agg, idx) in spec.aggregations.iter().zip(&agg_idx) {
                    let value = match idx {
                        Some(i) => aggregate(agg.op, &members.iter().map(|r| &r[*i]).collect::<Vec<_>>()),
                        None => Scalar::Number(members.len() as f64),
                    };
                    key.push(value);
                }
                key
            })
            .collect();
        let grouped = Table::new(columns, out_rows);
        grouped.check_shape().map_err(NodeError::InvalidConfig)?;
        grouped
    };

    if let Some(sort) = &spec.sort {
        let idx = column(&out, &sort.column)?;
        out.rows.sort_by(|a, b| {
            let ord = compare_scalars(&a[idx], &b[idx]);
            if sort.descending {
                ord.reverse()
            } else {
                ord
            }
        });
    }
    if let Some(limit) = spec.limit {
        out.rows.truncate(limit);
    }
    Ok(out)
}

//! Test instruments registered as ordinary nodes: a sleeper for parallelism
//! measurements and a fault injector for retry semantics.

use std::collections::HashMap;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::json;

use super::{cfg_str, cfg_u64, tool_spec, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::protocol::{ConfigField, NodeSpec, PortSchema, Value, ValueKind};

pub struct SleepTool;

impl SleepTool {
    pub const TYPE_ID: &'static str = "util.sleep";

    pub fn spec() -> NodeSpec {
        tool_spec(
            Self::TYPE_ID,
            "Sleeps for a fixed duration and returns a token",
            vec![],
            vec![PortSchema::output("token", ValueKind::Text, "slept:<duration_ms>")],
            vec![ConfigField::new("duration_ms", ValueKind::Integer, "Sleep duration in milliseconds")
                .with_default(json!(0))],
        )
    }
}

impl ToolNode for SleepTool {
    fn execute(&self, _ctx: &NodeContext, _inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let ms = cfg_u64(config, "duration_ms")?;
        if ms > 0 {
            std::thread::sleep(Duration::from_millis(ms));
        }
        Ok(PortMap::from([("token".to_string(), Value::text(format!("slept:{ms}")))]))
    }
}

/// Fails the first `fail_times` attempts of each (run, node), then returns "ok".
#[derive(Default)]
pub struct FlakyTool {
    attempts: Mutex<HashMap<(String, String), u64>>,
}

impl FlakyTool {
    pub const TYPE_ID: &'static str = "util.flaky";

    pub fn spec() -> NodeSpec {
        tool_spec(
            Self::TYPE_ID,
            "Fault injector: fails a configured number of times before succeeding",
            vec![],
            vec![PortSchema::output("token", ValueKind::Text, "ok once the injected failures are spent")],
            vec![
                ConfigField::new("fail_times", ValueKind::Integer, "Number of leading attempts that fail")
                    .with_default(json!(0)),
                ConfigField::new("error_class", ValueKind::Text, "transient or fatal").with_default(json!("transient")),
            ],
        )
    }
}

impl ToolNode for FlakyTool {
    fn execute(&self, ctx: &NodeContext, _inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let fail_times = cfg_u64(config, "fail_times")?;
        let fatal = match cfg_str(config, "error_class")? {
            "transient" => false,
            "fatal" => true,
            other => return Err(NodeError::InvalidConfig(format!("unknown error_class {other:?}"))),
        };
        let attempt = {
            let mut counters = self.attempts.lock();
            let n = counters.entry((ctx.run_id.clone(), ctx.node_id.clone())).or_insert(0);
            *n += 1;
            *n
        };
        if attempt <= fail_times {
            let attempt = attempt as u32;
            return Err(if fatal {
                NodeError::InjectedFatal { attempt }
            } else {
                NodeError::InjectedTransient { attempt }
            });
        }
        Ok(PortMap::from([("token".to_string(), Value::text("ok"))]))
    }
}

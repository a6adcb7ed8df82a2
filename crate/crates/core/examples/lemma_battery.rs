//! Run the oracle battery and print the slack table.
use quantal::oracle::{run_battery, BatteryConfig};

fn main() {
    let instances = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let report = run_battery(&BatteryConfig { instances, ..BatteryConfig::default() });
    print!("{}", report.slack_table());
    println!("passed: {}", report.passed());
}

//! The hypothesis-test battery on an onset table: rank agreement,
//! calibration to y = x, and nested models against a covariate.

use std::collections::BTreeMap;

use grokscale::stats::{run_battery, BatteryOptions, Covariate, OnsetRow, OnsetTable};

fn main() -> grokscale::Result<()> {
    let rows = (0..10)
        .map(|i| {
            let cross = 3.0 + 0.15 * i as f64;
            let wiggle = 0.03 * (((i * 7) % 5) as f64 - 2.0);
            OnsetRow {
                cell: format!("p{}", 97 + 4 * i),
                pred_log10: cross,
                emp_log10: cross - 0.16 + wiggle,
                covariates: BTreeMap::from([("weight_decay".to_string(), Covariate::Numeric([0.1, 1.0][i % 2]))]),
            }
        })
        .collect();
    let table = OnsetTable { rows };
    let report = run_battery(&table, &BatteryOptions { n_perm: 2000, n_boot: 2000, seed: 0 })?;
    print!("{}", report.render_table());
    Ok(())
}

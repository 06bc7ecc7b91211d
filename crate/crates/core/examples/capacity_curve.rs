//! Capacity curves on random labels and the bits-per-parameter fit through
//! their plateaus.

use grokscale::model::ModelConfig;
use grokscale::pipelines::{fit_capacity_line, geometric_grid, run_capacity_sweep};
use grokscale::training::TrainConfig;

fn main() -> grokscale::Result<()> {
    let v = 9;
    let n_grid = geometric_grid(8, 256, 5);
    let train = TrainConfig { max_epochs: 400, plateau_patience: 30, ..TrainConfig::default() };
    let curves = run_capacity_sweep(&[4, 6, 8], &n_grid, &ModelConfig::new(v, 4), &train, 42, 2)?;
    for c in &curves {
        let pts: Vec<String> = c.points.iter().map(|p| format!("{}:{:.0}", p.n, p.memorisation_bits)).collect();
        println!("d={} P={} plateau {:.1} bits{}  [{}]", c.dim, c.params, c.plateau_bits, if c.censored { " (censored)" } else { "" }, pts.join(" "));
    }
    match fit_capacity_line(&curves) {
        Ok(f) => println!("C_model = {:.3} bits/param, R^2 = {:.3}", f.c_model, f.r2),
        Err(e) => println!("no fit: {e}"),
    }
    Ok(())
}

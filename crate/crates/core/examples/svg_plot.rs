//! Writes a two-axis log-scale SVG plot with a crosshair.

use grokscale::svg::{Mark, Plot, Series};

fn main() -> std::io::Result<()> {
    let p: Vec<f64> = (0..12).map(|i| 300.0 * 1.4f64.powi(i)).collect();
    let delay: Vec<(f64, f64)> = p.iter().map(|&x| (x, if x < 2000.0 { 0.0 } else { (x / 2000.0).ln() * 400.0 })).collect();
    let t_gen: Vec<(f64, f64)> = p.iter().map(|&x| (x, 800.0 * (x / 300.0).powf(-0.4))).collect();
    let t_mem: Vec<(f64, f64)> = p.iter().map(|&x| (x, 3000.0 * (x / 300.0).powf(-1.1))).collect();
    let plot = Plot {
        title: "Delay and learning speeds".into(),
        x_label: "P (parameters)".into(),
        y_label: "delta E (epochs)".into(),
        y2_label: Some("saturation epoch".into()),
        log_x: true,
        log_y2: true,
        series: vec![
            Series::new("delta E", delay, Mark::Scatter),
            Series::new("T_gen", t_gen, Mark::Line).right(),
            Series::new("T_mem", t_mem, Mark::Line).right(),
        ],
        crosshair_x: Some(2000.0),
        ..Default::default()
    };
    let path = std::env::temp_dir().join("grokscale-example.svg");
    std::fs::write(&path, plot.render())?;
    println!("wrote {}", path.display());
    Ok(())
}

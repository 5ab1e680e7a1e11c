use std::fmt::Write as _;
use std::path::Path;

use super::{run_training, Checkpoint, LossBreakdown, RunOutput, TrainConfig, TrainData};
use crate::data::Corpus;
use crate::encoders::SpeakerEncoder;
use crate::error::{Error, Result};
use crate::latent::Backbone;

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    /// Interval loss rows per alpha, all on the same step grid.
    pub curves: Vec<Vec<LossBreakdown>>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Runs hybrid training once per alpha with otherwise identical config and
/// seed.
pub fn alpha_sweep(
    corpus: &Corpus,
    speaker: &SpeakerEncoder,
    backbone: &Backbone,
    alphas: &[f64],
    config: &TrainConfig,
) -> Result<SweepResult> {
    if alphas.is_empty() {
        return Err(Error::input("alpha sweep needs at least one alpha"));
    }
    let mut checkpoints = alphas
        .iter()
        .map(|&alpha| {
            let cfg = TrainConfig {
                alpha,
                ..config.clone()
            };
            Checkpoint::new(speaker.clone(), backbone.clone(), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData::new(corpus, &checkpoints[0].model)?;
    // runs are independent and individually seeded, so one thread each
    let curves = std::thread::scope(|scope| {
        let handles: Vec<_> = checkpoints
            .iter_mut()
            .map(|ckpt| {
                let data = &data;
                scope.spawn(move || run_training(ckpt, data, &RunOutput::default()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        curves,
        checkpoints,
    })
}

/// One row per logged step; for each alpha the four loss columns.
pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut out = String::from("step");
    for a in &result.alphas {
        write!(out, ",l_kl@{a},l_contrastive@{a},total@{a},tau@{a}").expect("string write");
    }
    out.push('\n');
    let rows = result.curves.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..rows {
        write!(out, "{}", result.curves[0][i].step).expect("string write");
        for c in &result.curves {
            let r = &c[i];
            write!(
                out,
                ",{:.8e},{:.8e},{:.8e},{:.8e}",
                r.l_kl, r.l_contrastive, r.total, r.tau
            )
            .expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Total-loss curves against step as a standalone SVG line chart.
pub fn write_sweep_svg(result: &SweepResult, path: &Path) -> Result<()> {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let points: Vec<(f64, f64)> = result
        .curves
        .iter()
        .flatten()
        .map(|r| (r.step as f64, r.total))
        .collect();
    let x_max = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_max = points.iter().map(|p| p.1).fold(f64::MIN_POSITIVE, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(y_max, f64::min).min(0.0);
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y_min) / (y_max - y_min).max(1e-12) * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">step</text>\n\
         <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">total loss</text>\n\
         <text x=\"{pad}\" y=\"{ty}\" text-anchor=\"middle\">0</text>\n\
         <text x=\"{r}\" y=\"{ty}\" text-anchor=\"middle\">{x_max}</text>\n\
         <text x=\"{lx}\" y=\"{b}\" text-anchor=\"end\">{y_min:.2}</text>\n\
         <text x=\"{lx}\" y=\"{pad}\" text-anchor=\"end\">{y_max:.2}</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ly = h - 10.0,
        cy = h / 2.0,
        ty = h - pad + 16.0,
        lx = pad - 4.0,
    );
    for (i, (alpha, curve)) in result.alphas.iter().zip(&result.curves).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .iter()
            .map(|r| format!("{:.1},{:.1}", sx(r.step as f64), sy(r.total)))
            .collect();
        writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">alpha = {alpha}</text>",
            w - pad - 90.0,
            pad + 16.0 * i as f64
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

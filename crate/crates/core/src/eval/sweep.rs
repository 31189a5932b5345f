use std::fmt::Write as _;

use super::metrics::{evaluate, EvalReport};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{stage1_pretrain, stage2_train_ldm, stage3_finetune, Checkpoint, PreparedData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Rho,
    Sigma,
    Steps,
    Stride,
    Omega,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rho" => Ok(Self::Rho),
            "sigma" => Ok(Self::Sigma),
            "t" | "steps" => Ok(Self::Steps),
            "stride" | "dt" => Ok(Self::Stride),
            "omega" => Ok(Self::Omega),
            _ => Err(Error::Usage(format!("unknown sweep axis {s:?} (rho, sigma, T, stride, omega)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rho => "rho",
            Self::Sigma => "sigma",
            Self::Steps => "T",
            Self::Stride => "stride",
            Self::Omega => "omega",
        }
    }

    /// The configuration key the axis sets.
    pub fn key(self) -> &'static str {
        match self {
            Self::Rho => "train.rho",
            Self::Sigma => "train.sigma",
            Self::Steps => "diffusion.T",
            Self::Stride => "diffusion.stride",
            Self::Omega => "diffusion.omega",
        }
    }

    /// Number of leading training stages the axis leaves unchanged.
    fn shared_stages(self) -> u8 {
        match self {
            Self::Rho | Self::Sigma => 0,
            Self::Steps => 1,
            Self::Stride | Self::Omega => 2,
        }
    }

    fn format(self, v: f64) -> String {
        match self {
            Self::Steps | Self::Stride => format!("{}", v as usize),
            _ => format!("{v}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<(f64, EvalReport)>,
    /// Values that were not run, with the reason.
    pub skipped: Vec<(f64, String)>,
}

/// Trains and evaluates one model per value of `axis`, all with the seeds of
/// `base`. Stages that the axis does not influence are trained once and
/// shared, which gives the same models as retraining them per value.
pub fn sweep(data: &PreparedData, base: &Config, axis: SweepAxis, values: &[f64]) -> Result<SweepResult> {
    base.validate()?;
    let mut configs = Vec::new();
    let mut skipped = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        match cfg.set(axis.key(), &axis.format(v)).and_then(|_| cfg.validate()) {
            Ok(()) if matches!(axis, SweepAxis::Steps | SweepAxis::Stride) && v.fract() != 0.0 => {
                skipped.push((v, "not an integer".into()))
            }
            Ok(()) => configs.push((v, cfg)),
            Err(e) => skipped.push((v, e.to_string())),
        }
    }
    let mut shared: Option<Checkpoint> = None;
    let mut rows = Vec::with_capacity(configs.len());
    for (v, cfg) in configs {
        let stage1 = match (&shared, axis.shared_stages()) {
            (Some(c), n) if n >= 1 => c.clone(),
            _ => stage1_pretrain(data, &cfg)?.0,
        };
        let stage2 = match (&shared, axis.shared_stages()) {
            (Some(c), 2) => c.clone(),
            _ => stage2_train_ldm(data, &stage1, &cfg)?.0,
        };
        if shared.is_none() {
            shared = match axis.shared_stages() {
                1 => Some(stage1),
                2 => Some(stage2.clone()),
                _ => None,
            };
        }
        let (stage3, _) = stage3_finetune(data, &stage2, &cfg)?;
        let report = evaluate(&stage3, &data.tests, &cfg.eval.ks, &cfg.guidance, cfg.train.seed)?;
        rows.push((v, report));
    }
    Ok(SweepResult { axis, rows, skipped })
}

impl SweepResult {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>10}", self.axis.name());
        if let Some((_, r)) = self.rows.first() {
            for k in &r.ks {
                let _ = write!(s, " {:>9} {:>9}", format!("R@{k}"), format!("N@{k}"));
            }
        }
        s.push('\n');
        for (v, r) in &self.rows {
            let _ = write!(s, "{:>10}", self.axis.format(*v));
            for (rc, nd) in r.overall.recall.iter().zip(&r.overall.ndcg) {
                let _ = write!(s, " {rc:>9.4} {nd:>9.4}");
            }
            s.push('\n');
        }
        for (v, why) in &self.skipped {
            let _ = writeln!(s, "# skipped {}: {why}", self.axis.format(*v));
        }
        s
    }

    /// Line plot of every Recall@K and NDCG@K series against the axis value,
    /// points spaced evenly in sweep order.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (560.0, 360.0, 50.0);
        let n = self.rows.len();
        let x = |i: usize| {
            if n <= 1 {
                w / 2.0
            } else {
                pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64
            }
        };
        let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad,
            w - pad,
            h - pad,
            h - pad
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick}</text>",
                pad - 6.0,
                y(tick) + 4.0
            );
        }
        for (i, (v, _)) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                x(i),
                h - pad + 18.0,
                self.axis.format(*v)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            w / 2.0,
            h - 10.0,
            self.axis.name()
        );
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let ks = self.rows.first().map(|(_, r)| r.ks.clone()).unwrap_or_default();
        let mut series = Vec::new();
        for (ki, k) in ks.iter().enumerate() {
            series.push((format!("R@{k}"), self.rows.iter().map(|(_, r)| r.overall.recall[ki]).collect::<Vec<_>>()));
            series.push((format!("N@{k}"), self.rows.iter().map(|(_, r)| r.overall.ndcg[ki]).collect()));
        }
        for (si, (label, vals)) in series.iter().enumerate() {
            let c = colors[si % colors.len()];
            let pts: Vec<String> = vals.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            for (i, &v) in vals.iter().enumerate() {
                let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", x(i), y(v));
            }
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{label}</text>",
                w - pad + 4.0,
                pad + 14.0 * si as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in [SweepAxis::Rho, SweepAxis::Sigma, SweepAxis::Steps, SweepAxis::Stride, SweepAxis::Omega] {
            assert_eq!(SweepAxis::parse(a.name()).unwrap(), a);
        }
        assert!(SweepAxis::parse("lr").is_err());
        assert_eq!(SweepAxis::Steps.format(200.0), "200");
        assert_eq!(SweepAxis::Omega.format(0.5), "0.5");
    }
}

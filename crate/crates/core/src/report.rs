//! CSV and SVG emitters for analysis artifacts.
//!
//! Reals are printed with 17 significant digits in the style of C's `%.17g`,
//! which round-trips every `f64`. Files use LF line endings and are
//! overwritten on every run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analysis::{Histogram, SecurityCurve, StepTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::TrainReport;

/// `%.17g`.
pub fn format_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (16 - exp) as usize;
        trim_fraction(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const STEP_TABLE_HEADER: &str = "method,step,adversarial_accuracy,adversarial_loss";
pub const SECURITY_CURVE_HEADER: &str = "attack,defense_model,epsilon,adversarial_accuracy";
pub const HISTOGRAM_HEADER: &str = "method,step,bin_left,bin_right,count";
pub const TRAINING_HEADER: &str =
    "epoch,train_loss,train_accuracy,validation_accuracy,validation_loss,adversarial_accuracy,adversarial_loss";

pub fn step_table_csv(table: &StepTable) -> String {
    let mut out = format!("{STEP_TABLE_HEADER}\n");
    for r in &table.rows {
        writeln!(out, "{},{},{},{}", r.label, r.step, format_g17(r.accuracy), format_g17(r.loss)).unwrap();
    }
    out
}

pub fn security_curves_csv(curves: &[SecurityCurve]) -> String {
    let mut out = format!("{SECURITY_CURVE_HEADER}\n");
    for c in curves {
        for (e, a) in c.epsilons.iter().zip(&c.accuracies) {
            writeln!(out, "{},{},{},{}", c.attack, c.model, format_g17(*e), format_g17(*a)).unwrap();
        }
    }
    out
}

pub fn histograms_csv(hists: &[Histogram]) -> String {
    let mut out = format!("{HISTOGRAM_HEADER}\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(out, "{},{},{},{},{c}", h.method, h.step, format_g17(h.edges[i]), format_g17(h.edges[i + 1])).unwrap();
        }
    }
    out
}

/// Empty fields where a metric was not computed.
pub fn training_csv(report: &TrainReport) -> String {
    let opt = |v: Option<f64>| v.map(format_g17).unwrap_or_default();
    let mut out = format!("{TRAINING_HEADER}\n");
    for e in &report.epochs {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.epoch,
            format_g17(e.train_loss),
            format_g17(e.train_accuracy),
            opt(e.validation.map(|v| v.accuracy)),
            opt(e.validation.map(|v| v.mean_loss)),
            opt(e.validation_adversarial.map(|v| v.accuracy)),
            opt(e.validation_adversarial.map(|v| v.mean_loss)),
        )
        .unwrap();
    }
    out
}

fn csv_error(line: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: format!("<csv line {line}>").into(),
        reason: reason.into(),
    }
}

/// Parses [`security_curves_csv`] output. Curves are keyed by
/// `(attack, defense_model)` in order of first appearance.
pub fn parse_security_curves(text: &str) -> Result<Vec<SecurityCurve>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SECURITY_CURVE_HEADER => {}
        _ => return Err(csv_error(1, format!("expected header {SECURITY_CURVE_HEADER:?}"))),
    }
    let mut curves: Vec<SecurityCurve> = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let [attack, model, eps, acc] = fields[..] else {
            return Err(csv_error(i + 1, format!("expected 4 fields, got {}", fields.len())));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| csv_error(i + 1, format!("bad number {s:?}")));
        let (eps, acc) = (num(eps)?, num(acc)?);
        match curves.iter_mut().find(|c| c.attack == attack && c.model == model) {
            Some(c) => {
                c.epsilons.push(eps);
                c.accuracies.push(acc);
            }
            None => curves.push(SecurityCurve {
                attack: attack.to_string(),
                model: model.to_string(),
                epsilons: vec![eps],
                accuracies: vec![acc],
            }),
        }
    }
    Ok(curves)
}

/// Column chart of one histogram.
pub fn histogram_svg(h: &Histogram) -> String {
    let (w, ht, pad) = (640.0, 320.0, 40.0);
    let n = h.counts.len();
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar = (w - 2.0 * pad) / n as f64;
    let mut out = svg_open(w, ht);
    writeln!(
        out,
        "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{} step {} (eps {})</text>",
        h.method,
        h.step,
        format_g17(h.epsilon)
    )
    .unwrap();
    for (i, &c) in h.counts.iter().enumerate() {
        let bh = (ht - 2.0 * pad) * c as f64 / max;
        writeln!(
            out,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#3b6ea8\"/>",
            pad + bar * i as f64,
            ht - pad - bh,
            bar,
            bh
        )
        .unwrap();
    }
    let axis = ht - pad;
    writeln!(out, "<line x1=\"{pad}\" y1=\"{axis}\" x2=\"{}\" y2=\"{axis}\" stroke=\"black\"/>", w - pad).unwrap();
    for (x, label) in [(pad, h.edges[0]), (w - pad, h.edges[n])] {
        writeln!(
            out,
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            axis + 16.0,
            format_g17(label)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// One rectangle per cell of an `[H, W]` field on a blue-white-red scale
/// symmetric about zero.
pub fn heatmap_svg(field: &Tensor, title: &str) -> Result<String> {
    if field.rank() != 2 {
        return Err(crate::error::invalid(format!("heatmap needs an [H, W] field, got {:?}", field.shape())));
    }
    let (rows, cols) = (field.shape()[0], field.shape()[1]);
    let cell = 12.0;
    let top = 28.0;
    let scale = field.max_abs();
    let mut out = svg_open(cols as f64 * cell, rows as f64 * cell + top);
    writeln!(
        out,
        "<text x=\"2\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">{} (|max| {})</text>",
        escape(title),
        format_g17(scale)
    )
    .unwrap();
    for r in 0..rows {
        for c in 0..cols {
            let v = field.data()[r * cols + c];
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>",
                c as f64 * cell,
                top + r as f64 * cell,
                diverging(t)
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn diverging(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(-t), fade(-t), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn svg_open(w: f64, h: f64) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_artifact(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{StepRow, DEFAULT_BINS};
    use crate::attacks::Method;

    #[test]
    fn g17_matches_c_printf() {
        // Reference strings from printf("%.17g").
        let cases = [
            (0.1, "0.10000000000000001"),
            (1.0, "1"),
            (0.5, "0.5"),
            (100.0, "100"),
            (1e-5, "1.0000000000000001e-05"),
            (123456789012345680.0, "1.2345678901234568e+17"),
            (-2.5, "-2.5"),
            (0.0001, "0.0001"),
            (1e16, "10000000000000000"),
            (1e17, "1e+17"),
            (0.3, "0.29999999999999999"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g17(v), s, "{v:e}");
        }
    }

    #[test]
    fn g17_round_trips() {
        for v in [0.1, 1.0 / 3.0, 2.2452, 1e-300, 6.02e23, -7.5e-7, f64::MAX, f64::MIN_POSITIVE] {
            assert_eq!(format_g17(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn two_bin_histogram_has_two_rows() {
        let h = Histogram::from_values(Method::Pgd, 1, 1.0, &[-0.5, 0.5, 0.7], -1.0, 1.0, 2).unwrap();
        let csv = histograms_csv(&[h]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines, vec![HISTOGRAM_HEADER, "pgd,1,-1,0,1", "pgd,1,0,1,2"]);
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn security_curve_round_trip() {
        let curves = vec![
            SecurityCurve {
                attack: "pgd".into(),
                model: "adv".into(),
                epsilons: vec![0.0, 0.1, 0.3],
                accuracies: vec![0.99, 0.9, 1.0 / 3.0],
            },
            SecurityCurve {
                attack: "spgd".into(),
                model: "adv".into(),
                epsilons: vec![0.0],
                accuracies: vec![0.97],
            },
        ];
        assert_eq!(parse_security_curves(&security_curves_csv(&curves)).unwrap(), curves);
        assert!(parse_security_curves("nope\n").is_err());
        assert!(parse_security_curves(&format!("{SECURITY_CURVE_HEADER}\na,b,c\n")).is_err());
    }

    #[test]
    fn step_table_layout() {
        let t = StepTable {
            rows: vec![StepRow {
                label: "spgd".into(),
                method: Method::Spgd,
                step: 1,
                accuracy: 0.5,
                loss: 2.25,
            }],
        };
        assert_eq!(step_table_csv(&t), format!("{STEP_TABLE_HEADER}\nspgd,1,0.5,2.25\n"));
    }

    #[test]
    fn svgs_are_well_formed() {
        let h = Histogram::from_values(Method::Pgd, 1, 0.3, &[0.0; 5], -0.375, 0.375, DEFAULT_BINS).unwrap();
        let s = histogram_svg(&h);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<rect").count(), DEFAULT_BINS + 1);
        let f = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        let m = heatmap_svg(&f, "g").unwrap();
        assert!(m.contains("#0000ff") && m.contains("#ffffff") && m.contains("#ff0000"));
        assert!(heatmap_svg(&Tensor::zeros(vec![4]), "bad").is_err());
    }
}

//! Cross-method comparison over completed runs: a table of mean all-seen
//! accuracy per task with an average-improvement column, an accuracy-vs-task
//! line plot, and grids of generated images for every incremental step.

use std::fs;
use std::path::{Path, PathBuf};

use genreplay_core::checkpoint::load_generator;
use genreplay_core::evaluation::{average_improvement, METRICS_COLUMNS, METRICS_SCHEMA_VERSION};
use genreplay_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::run::{write_atomic, RunManifest, RunStatus, METRICS_FILE};

/// Method whose accuracy the improvement column is measured from.
pub const REFERENCE_METHOD: &str = "ours";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub run_dir: PathBuf,
    /// Mean all-seen top-1 after each task.
    pub per_task: Vec<f64>,
    /// Mean over tasks 2..N of (reference − this method); empty for the
    /// reference itself or when no reference run is present.
    pub avg_improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub dataset: String,
    pub protocol: String,
    pub rows: Vec<ReportRow>,
    pub files: Vec<PathBuf>,
}

/// Mean all-seen accuracy per task from a metrics CSV, after checking its schema.
pub fn read_mean_accuracy(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(HarnessError::Schema(format!("{} has columns {header:?}, expected {METRICS_COLUMNS:?}", path.display())));
    }
    let mut means = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let version: u32 = rec[0]
            .parse()
            .map_err(|_| HarnessError::Schema(format!("{}: bad schema_version {:?}", path.display(), &rec[0])))?;
        if version != METRICS_SCHEMA_VERSION {
            return Err(HarnessError::Schema(format!(
                "{} uses metrics schema {version}, this build reads {METRICS_SCHEMA_VERSION}",
                path.display()
            )));
        }
        if &rec[2] == "mean" {
            let task: usize = rec[3].parse().map_err(|_| HarnessError::Schema(format!("bad task {:?}", &rec[3])))?;
            let acc: f64 = rec[4].parse().map_err(|_| HarnessError::Schema(format!("bad accuracy {:?}", &rec[4])))?;
            if task != means.len() + 1 {
                return Err(HarnessError::Schema(format!("{}: mean rows out of order at task {task}", path.display())));
            }
            means.push(acc);
        }
    }
    if means.is_empty() {
        return Err(HarnessError::Schema(format!("{} has no mean rows", path.display())));
    }
    Ok(means)
}

struct LoadedRun {
    dir: PathBuf,
    manifest: RunManifest,
    means: Vec<f64>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::load(dir)?;
    if manifest.status != RunStatus::Complete {
        return Err(HarnessError::Incomplete { path: dir.to_path_buf(), status: manifest.status.to_string() });
    }
    let means = read_mean_accuracy(&dir.join(METRICS_FILE))?;
    Ok(LoadedRun { dir: dir.to_path_buf(), manifest, means })
}

fn check_comparable(runs: &[LoadedRun]) -> Result<()> {
    let first = &runs[0];
    let mut diff = Vec::new();
    for r in &runs[1..] {
        let mut field = |name: &str, a: &str, b: &str| {
            if a != b {
                diff.push(format!("{name}: {a} ({}) vs {b} ({})", first.dir.display(), r.dir.display()));
            }
        };
        field("protocol", &first.manifest.protocol, &r.manifest.protocol);
        field("dataset", &first.manifest.dataset_digest, &r.manifest.dataset_digest);
        field("tasks", &first.means.len().to_string(), &r.means.len().to_string());
    }
    if diff.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Mismatch(diff))
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy (0 to 100) against task number, one polyline per row.
pub fn accuracy_svg(title: &str, rows: &[ReportRow]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = rows.iter().map(|r| r.per_task.len()).max().unwrap_or(1).max(1);
    let x = |t: usize| left + if n == 1 { pw / 2.0 } else { pw * t as f64 / (n - 1) as f64 };
    let y = |acc: f64| top + ph * (1.0 - acc.clamp(0.0, 100.0) / 100.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    s.push_str(&format!("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", left + pw / 2.0, xml_escape(title)));
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        s.push_str(&format!("<line x1=\"{left}\" y1=\"{ty}\" x2=\"{}\" y2=\"{ty}\" stroke=\"#ddd\"/>\n", left + pw));
        s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick}</text>\n", left - 6.0, ty + 4.0));
    }
    for t in 0..n {
        s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x(t), top + ph + 18.0, t + 1));
    }
    s.push_str(&format!("<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">task</text>\n", left + pw / 2.0, h - 12.0));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">top-1 accuracy (%)</text>\n",
        top + ph / 2.0,
        top + ph / 2.0
    ));
    for (i, row) in rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = row.per_task.iter().enumerate().map(|(t, &a)| format!("{:.2},{:.2}", x(t), y(a))).collect();
        s.push_str(&format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n", pts.join(" ")));
        for (t, &a) in row.per_task.iter().enumerate() {
            s.push_str(&format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n", x(t), y(a)));
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let lx = left + pw + 12.0;
        s.push_str(&format!("<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n", lx + 18.0));
        s.push_str(&format!("<text x=\"{}\" y=\"{}\">{}</text>\n", lx + 24.0, ly + 4.0, xml_escape(&row.method)));
    }
    s.push_str("</svg>\n");
    s
}

/// Tiles `[n, c, h, w]` images with values in [−1, 1] into a square grid,
/// each pixel scaled up by `zoom`.
pub fn image_grid(images: &Tensor, zoom: u32) -> Result<image::DynamicImage> {
    let shape = images.shape();
    if shape.len() != 4 || !(shape[1] == 1 || shape[1] == 3) || shape[0] == 0 {
        return Err(genreplay_core::Error::Dimension(format!("image grid needs [n, 1|3, h, w], got {shape:?}")).into());
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let pad = 1;
    let gw = (cols * (w + pad) + pad) as u32 * zoom;
    let gh = (rows * (h + pad) + pad) as u32 * zoom;
    let mut out = image::RgbImage::from_pixel(gw, gh, image::Rgb([255, 255, 255]));
    let data = images.data();
    let to_u8 = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
    for k in 0..n {
        let (r, col) = (k / cols, k % cols);
        let (ox, oy) = (col * (w + pad) + pad, r * (h + pad) + pad);
        for yy in 0..h {
            for xx in 0..w {
                let px = |ch: usize| to_u8(data[((k * c + ch) * h + yy) * w + xx]);
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        out.put_pixel((ox + xx) as u32 * zoom + dx, (oy + yy) as u32 * zoom + dy, image::Rgb(rgb));
                    }
                }
            }
        }
    }
    Ok(image::DynamicImage::ImageRgb8(out))
}

fn sample_grids(run: &LoadedRun, out_dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let Some(&seed) = run.manifest.seeds.first() else { return Ok(()) };
    for task in 2..=run.means.len() {
        let path = run.dir.join(format!("seed-{seed}")).join(format!("generator-{task}.ckpt"));
        if !path.exists() {
            continue;
        }
        let (generator, _) = load_generator(&path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Tensor::randn(&[64, generator.noise_dim()], 1.0, &mut rng);
        let images = generator.generate(&noise)?;
        let zoom = (64 / images.shape()[2].max(1)).clamp(1, 8) as u32;
        let dst = out_dir.join("samples").join(format!("{}-task-{task}.png", run.manifest.method));
        fs::create_dir_all(dst.parent().expect("has parent")).map_err(|e| HarnessError::io("creating samples dir", e))?;
        image_grid(&images, zoom)?.save(&dst)?;
        files.push(dst);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// Compares completed runs that share protocol and dataset and writes
/// `report.csv`, `report.md`, `accuracy.svg` and `samples/*.png` into `out_dir`.
pub fn emit_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(HarnessError::Config(vec!["report needs at least one run directory".into()]));
    }
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    check_comparable(&runs)?;
    let reference = runs.iter().find(|r| r.manifest.method == REFERENCE_METHOD).map(|r| r.means.clone());
    let rows: Vec<ReportRow> = runs
        .iter()
        .map(|r| ReportRow {
            method: r.manifest.method.clone(),
            run_dir: r.dir.clone(),
            per_task: r.means.clone(),
            avg_improvement: match &reference {
                Some(ours) if r.manifest.method != REFERENCE_METHOD => average_improvement(ours, &r.means),
                _ => None,
            },
        })
        .collect();
    let n = runs[0].means.len();
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(format!("creating {}", out_dir.display()), e))?;
    let mut files = Vec::new();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    header.extend((1..=n).map(|t| format!("task_{t}")));
    header.push("avg_improvement".into());
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.method.clone()];
        rec.extend(r.per_task.iter().map(|v| v.to_string()));
        rec.push(r.avg_improvement.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io("flushing report", e.into_error()))?;
    let p = out_dir.join("report.csv");
    write_atomic(&p, &bytes)?;
    files.push(p);

    let dataset = runs[0].manifest.dataset_name.clone();
    let protocol = runs[0].manifest.protocol.clone();
    let mut md = format!("# {dataset}, {protocol}\n\nMean top-1 accuracy (%) on all seen classes after each task.\n\n| method |");
    for t in 1..=n {
        md.push_str(&format!(" task {t} |"));
    }
    md.push_str(&format!(" avg. improvement of {REFERENCE_METHOD} |\n|---|"));
    md.push_str(&"---:|".repeat(n + 1));
    md.push('\n');
    for r in &rows {
        md.push_str(&format!("| {} |", r.method));
        for v in &r.per_task {
            md.push_str(&format!(" {v:.2} |"));
        }
        md.push_str(&format!(" {} |\n", fmt_opt(r.avg_improvement)));
    }
    let p = out_dir.join("report.md");
    write_atomic(&p, md.as_bytes())?;
    files.push(p);

    let p = out_dir.join("accuracy.svg");
    write_atomic(&p, accuracy_svg(&format!("{dataset} ({protocol})"), &rows).as_bytes())?;
    files.push(p);

    for r in &runs {
        sample_grids(r, out_dir, &mut files)?;
    }
    let report = Report { dataset, protocol, rows, files };
    let p = out_dir.join("report.json");
    write_atomic(&p, &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_polyline_per_row() {
        let row = |m: &str, v: Vec<f64>| ReportRow { method: m.into(), run_dir: PathBuf::new(), per_task: v, avg_improvement: None };
        let svg = accuracy_svg("t", &[row("a", vec![90.0, 50.0]), row("b<", vec![80.0, 60.0])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;"));
    }

    #[test]
    fn grid_dimensions() {
        let imgs = Tensor::zeros(&[5, 1, 4, 4]);
        let g = image_grid(&imgs, 2).unwrap();
        // 3 columns, 2 rows, 1-pixel gutters.
        assert_eq!((g.width(), g.height()), ((3 * 5 + 1) * 2, (2 * 5 + 1) * 2));
    }
}

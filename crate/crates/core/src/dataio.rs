//! Persistence: the binary dataset format, the JSON model format, and the
//! transport-plan heatmap export.
//!
//! Dataset files (`PLOTFS01`) store features as little-endian 32-bit floats —
//! a documented lossy step on save; models are JSON with full-precision
//! floats (serde_json round-trips every finite f64 exactly) because training
//! must resume bit-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{Dataset, DatasetManifest, FeatureSet, PromptBank, TextEncoder};
use crate::error::{Error, Result};
use crate::head::{ClassScores, HeadConfig, Method};
use crate::trainer::{EpochStats, ModelState};
use crate::{Mat, Vec64};

/// Magic bytes opening every dataset file.
pub const DATASET_MAGIC: &[u8; 8] = b"PLOTFS01";

/// Supported model file version.
pub const MODEL_VERSION: u32 = 1;

/// Sidecar manifest path: `<dataset>.manifest.json`.
pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Write the dataset: header (`n_images`, `M`, `C`, `K` as little-endian
/// u32), then per image the u32 label, `M x C` local features, and the
/// global feature, all as little-endian f32. The manifest goes to the
/// sidecar path.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let cfg = &dataset.manifest.config;
    let (m, c) = (cfg.m_locals, cfg.feat_dim);
    let mut buf = Vec::with_capacity(8 + 16 + dataset.images.len() * (4 + 4 * c * (m + 1)));
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [
        dataset.images.len() as u32,
        m as u32,
        c as u32,
        dataset.n_classes as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for img in &dataset.images {
        if img.label >= dataset.n_classes {
            return Err(Error::LabelOutOfRange {
                label: img.label,
                classes: dataset.n_classes,
            });
        }
        buf.extend_from_slice(&(img.label as u32).to_le_bytes());
        for &x in img.locals.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &x in img.global.as_slice() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`]; the sidecar manifest is
/// required and must be consistent with the binary header. Malformed input
/// is rejected, never repaired.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        let found = bytes.get(..8).unwrap_or(&bytes);
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < 24 {
        return Err(Error::Truncated {
            expected: 24,
            actual: bytes.len() as u64,
        });
    }
    let header = |i: usize| -> u32 {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap())
    };
    let n_images = header(0) as usize;
    let m = header(1) as usize;
    let c = header(2) as usize;
    let k = header(3) as usize;
    let expected = 24 + n_images * (4 + 4 * c * (m + 1));
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }

    let manifest_file = manifest_path(path);
    let manifest: DatasetManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_file).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("sidecar manifest {}: {e}", manifest_file.display()),
            ))
        })?,
    )?;
    let cfg = &manifest.config;
    if cfg.m_locals != m || cfg.feat_dim != c || cfg.n_classes != k {
        return Err(Error::Shape(format!(
            "manifest says M={} C={} K={}, file header says M={m} C={c} K={k}",
            cfg.m_locals, cfg.feat_dim, cfg.n_classes
        )));
    }
    if cfg.n_train() + cfg.n_test() != n_images {
        return Err(Error::Shape(format!(
            "manifest splits cover {} images, file has {n_images}",
            cfg.n_train() + cfg.n_test()
        )));
    }

    let mut offset = 24;
    let read_f32 = |offset: &mut usize| -> f64 {
        let v = f32::from_le_bytes(bytes[*offset..*offset + 4].try_into().unwrap());
        *offset += 4;
        v as f64
    };
    let mut images = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let label = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        offset += 4;
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut locals = Vec::with_capacity(m * c);
        for _ in 0..m * c {
            locals.push(read_f32(&mut offset));
        }
        let mut global = Vec::with_capacity(c);
        for _ in 0..c {
            global.push(read_f32(&mut offset));
        }
        images.push(FeatureSet {
            locals: Mat::new(m, c, locals)?,
            global: Vec64::new(global),
            label,
        });
    }
    Ok(Dataset {
        images,
        n_classes: k,
        manifest,
    })
}

/// On-disk model document.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    method: Method,
    head: HeadConfig,
    seed: u64,
    ctx_len: usize,
    embed_dim: usize,
    feat_dim: usize,
    n_classes: usize,
    ctx: Vec<Mat>,
    class_tokens: Mat,
    projection: Mat,
    train_log: Vec<EpochStats>,
}

/// Lossless JSON round trip of every parameter.
pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    let doc = ModelFile {
        version: MODEL_VERSION,
        method: model.method,
        head: model.head.clone(),
        seed: model.seed,
        ctx_len: model.bank.ctx_len(),
        embed_dim: model.bank.embed_dim(),
        feat_dim: model.encoder.feat_dim(),
        n_classes: model.bank.n_classes(),
        ctx: model.bank.ctx.clone(),
        class_tokens: model.bank.class_tokens.clone(),
        projection: model.encoder.projection().clone(),
        train_log: model.train_log.clone(),
    };
    fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let doc: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: doc.version,
        });
    }
    doc.method.validate()?;
    doc.head.validate()?;
    if doc.ctx.is_empty() {
        return Err(Error::InvalidParam("model has no context tensors".into()));
    }
    for (n, ctx) in doc.ctx.iter().enumerate() {
        if ctx.rows() != doc.ctx_len || ctx.cols() != doc.embed_dim {
            return Err(Error::Shape(format!(
                "context tensor {n} is {}x{}, expected {}x{}",
                ctx.rows(),
                ctx.cols(),
                doc.ctx_len,
                doc.embed_dim
            )));
        }
    }
    if doc.class_tokens.rows() != doc.n_classes || doc.class_tokens.cols() != doc.embed_dim {
        return Err(Error::Shape("class token matrix disagrees with header dims".into()));
    }
    if doc.projection.rows() != doc.embed_dim || doc.projection.cols() != doc.feat_dim {
        return Err(Error::Shape("projection matrix disagrees with header dims".into()));
    }
    Ok(ModelState {
        bank: PromptBank {
            ctx: doc.ctx,
            class_tokens: doc.class_tokens,
        },
        encoder: TextEncoder::from_projection(doc.projection),
        head: doc.head,
        method: doc.method,
        seed: doc.seed,
        train_log: doc.train_log,
    })
}

/// Grid metadata for reshaping an image's plan columns into heatmaps.
#[derive(Debug, Clone, Copy)]
pub struct PlanImageMeta {
    pub image_index: usize,
    /// `(height, width)` with `height * width == M`; `None` skips graymaps.
    pub grid: Option<(usize, usize)>,
}

impl PlanImageMeta {
    /// Square grid when the local count is a perfect square.
    pub fn square(image_index: usize, m_locals: usize) -> Self {
        let side = (m_locals as f64).sqrt().round() as usize;
        let grid = (side * side == m_locals).then_some((side, side));
        Self { image_index, grid }
    }
}

/// Files written for one exported plan column.
#[derive(Debug, Clone)]
pub struct ExportedPlan {
    pub class: usize,
    pub prompt: usize,
    pub csv: PathBuf,
    /// Absent when the grid is unknown.
    pub graymap: Option<PathBuf>,
}

/// Export each (class, prompt) plan column as CSV, plus a P5 graymap
/// (max-normalized to 0-255) when `M` factors as a grid; `class_filter`
/// restricts the export to one class. Errors when the scores carry no plans.
pub fn export_plan(
    scores: &ClassScores,
    meta: PlanImageMeta,
    out_dir: &Path,
    class_filter: Option<usize>,
) -> Result<Vec<ExportedPlan>> {
    let plans = scores
        .plans
        .as_ref()
        .ok_or_else(|| Error::MissingPlans("method produced no transport plans".into()))?;
    if let Some(class) = class_filter {
        if class >= plans.len() {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: class,
                len: plans.len(),
            });
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (class, plan) in plans.iter().enumerate() {
        if class_filter.is_some_and(|want| want != class) {
            continue;
        }
        let m = plan.rows();
        if let Some((h, w)) = meta.grid {
            if h * w != m {
                return Err(Error::Shape(format!(
                    "grid {h}x{w} cannot hold {m} local features"
                )));
            }
        }
        for prompt in 0..plan.cols() {
            let column = plan.column(prompt);
            let stem = format!("img{}_class{class}_prompt{prompt}", meta.image_index);
            let csv = out_dir.join(format!("{stem}.csv"));
            write_column_csv(&column, meta.grid, &csv)?;
            let graymap = match meta.grid {
                Some((h, w)) => {
                    let path = out_dir.join(format!("{stem}.pgm"));
                    write_graymap(&column, h, w, &path)?;
                    Some(path)
                }
                None => None,
            };
            written.push(ExportedPlan {
                class,
                prompt,
                csv,
                graymap,
            });
        }
    }
    Ok(written)
}

/// Rows of the grid as comma-separated values ('.' decimal separator); a
/// single row when the grid is unknown.
fn write_column_csv(column: &[f64], grid: Option<(usize, usize)>, path: &Path) -> Result<()> {
    let width = grid.map_or(column.len(), |(_, w)| w);
    let mut out = String::new();
    for row in column.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Binary P5 graymap, maxval 255; pixel 255 is the column's maximum mass and
/// an all-zero column stays all zero.
fn write_graymap(column: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    let max = column.iter().copied().fold(0.0_f64, f64::max);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in column {
        let pixel = if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        bytes.push(pixel);
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{gen_synthetic, SynthConfig};
    use crate::head::plot_distances;
    use crate::ot::TransportPlan;
    use crate::trainer::{evaluate, init_model, train, TrainConfig};
    use crate::Vec64;

    fn small_dataset(seed: u64) -> Dataset {
        gen_synthetic(&SynthConfig {
            n_classes: 2,
            n_attributes: 2,
            shots: 3,
            test_per_class: 2,
            m_locals: 4,
            feat_dim: 8,
            noise_sigma: 0.05,
            background_prototypes: 1,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_after_f32_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.plotfs");
        let ds = small_dataset(3);
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.images.len(), ds.images.len());
        assert_eq!(loaded.manifest, ds.manifest);
        for (a, b) in ds.images.iter().zip(&loaded.images) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.locals.data().iter().zip(b.locals.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
            for (x, y) in a.global.as_slice().iter().zip(b.global.as_slice()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // second save of the loaded dataset is byte-identical
        let path2 = dir.path().join("d2.plotfs");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn dataset_save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.plotfs");
        let b = dir.path().join("b.plotfs");
        save_dataset(&small_dataset(9), &a).unwrap();
        save_dataset(&small_dataset(9), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(
            fs::read(manifest_path(&a)).unwrap(),
            fs::read(manifest_path(&b)).unwrap()
        );
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.plotfs");
        let ds = small_dataset(1);
        save_dataset(&ds, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        match load_dataset(&path) {
            Err(Error::BadMagic { expected, .. }) => assert_eq!(expected, "PLOTFS01"),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_truncation_with_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.plotfs");
        let ds = small_dataset(2);
        save_dataset(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let full = bytes.len() as u64;
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_dataset(&path) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 5);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lbl.plotfs");
        let ds = small_dataset(4);
        save_dataset(&ds, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // first image label sits right after the 24-byte header
        bytes[24..28].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::LabelOutOfRange { label: 99, .. })
        ));
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ds = small_dataset(5);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            head: crate::head::HeadConfig {
                n_prompts: 2,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let model = train(&ds, &config).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);

        let before = evaluate(&ds, &model).unwrap();
        let after = evaluate(&ds, &loaded).unwrap();
        assert_eq!(before.accuracy, after.accuracy);
        assert_eq!(before.per_class_accuracy, after.per_class_accuracy);
    }

    #[test]
    fn model_load_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ds = small_dataset(6);
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let model = init_model(ds.n_classes, ds.feat_dim(), &config).unwrap();
        save_model(&model, &path).unwrap();
        let doc = fs::read_to_string(&path).unwrap();
        fs::write(&path, doc.replace("\"version\":1", "\"version\":9")).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn export_plan_writes_csv_and_graymaps() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(7);
        let config = TrainConfig {
            epochs: 1,
            head: crate::head::HeadConfig {
                n_prompts: 2,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let model = init_model(ds.n_classes, ds.feat_dim(), &config).unwrap();
        let stack = crate::encoders::encode_prompts(&model.bank, &model.encoder).unwrap();
        let scores = plot_distances(&ds.images[0], &stack, &model.head).unwrap();
        let meta = PlanImageMeta::square(0, ds.m_locals());
        assert_eq!(meta.grid, Some((2, 2)));
        let written = export_plan(&scores, meta, dir.path(), None).unwrap();
        assert_eq!(written.len(), 2 * 2); // K classes x N prompts
        for item in &written {
            // CSV re-parses to the plan column within 1e-9
            let text = fs::read_to_string(&item.csv).unwrap();
            let parsed: Vec<f64> = text
                .lines()
                .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
                .collect();
            let column = scores.plans.as_ref().unwrap()[item.class].column(item.prompt);
            assert_eq!(parsed.len(), column.len());
            for (a, b) in parsed.iter().zip(&column) {
                assert!((a - b).abs() < 1e-9);
            }
            let pgm = fs::read(item.graymap.as_ref().unwrap()).unwrap();
            assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
            assert_eq!(pgm.len(), 11 + 4);
        }
    }

    #[test]
    fn export_plan_pixel_normalization() {
        let dir = tempfile::tempdir().unwrap();
        // one class, one prompt, column (0, 1): pixels 0 and 255
        let plan = TransportPlan::new(Mat::new(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        let scores = ClassScores {
            distances: Vec64::new(vec![0.1]),
            probabilities: Vec64::new(vec![1.0]),
            plans: Some(vec![plan]),
            inner_iterations: Some(vec![1]),
        };
        let meta = PlanImageMeta {
            image_index: 3,
            grid: Some((2, 1)),
        };
        let written = export_plan(&scores, meta, dir.path(), None).unwrap();
        let pgm = fs::read(written[0].graymap.as_ref().unwrap()).unwrap();
        assert_eq!(&pgm[pgm.len() - 2..], &[0u8, 255u8]);

        // uniform column maps to all-255
        let plan = TransportPlan::new(Mat::new(2, 1, vec![0.5, 0.5]).unwrap()).unwrap();
        let scores = ClassScores {
            distances: Vec64::new(vec![0.1]),
            probabilities: Vec64::new(vec![1.0]),
            plans: Some(vec![plan]),
            inner_iterations: Some(vec![1]),
        };
        let written = export_plan(&scores, meta, dir.path(), None).unwrap();
        let pgm = fs::read(written[0].graymap.as_ref().unwrap()).unwrap();
        assert_eq!(&pgm[pgm.len() - 2..], &[255u8, 255u8]);
    }

    #[test]
    fn export_plan_without_plans_errors() {
        let dir = tempfile::tempdir().unwrap();
        let scores = ClassScores {
            distances: Vec64::new(vec![0.1]),
            probabilities: Vec64::new(vec![1.0]),
            plans: None,
            inner_iterations: None,
        };
        let meta = PlanImageMeta::square(0, 4);
        assert!(matches!(
            export_plan(&scores, meta, dir.path(), None),
            Err(Error::MissingPlans(_))
        ));
    }

    #[test]
    fn export_plan_non_square_skips_graymap() {
        let dir = tempfile::tempdir().unwrap();
        let plan = TransportPlan::new(Mat::new(3, 1, vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        let scores = ClassScores {
            distances: Vec64::new(vec![0.1]),
            probabilities: Vec64::new(vec![1.0]),
            plans: Some(vec![plan]),
            inner_iterations: Some(vec![1]),
        };
        let meta = PlanImageMeta::square(0, 3);
        assert_eq!(meta.grid, None);
        let written = export_plan(&scores, meta, dir.path(), None).unwrap();
        assert!(written[0].graymap.is_none());
        assert!(written[0].csv.exists());
    }
}

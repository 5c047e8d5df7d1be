//! Raw ALS points to fixed-size network samples and back.
//!
//! Points are cut into square windows over the survey area, each window is
//! min-max normalized on its own, and a fixed number of points is drawn per
//! window (with bootstrap padding for sparse windows). Prediction reverses the
//! path: every sample remembers which block points it came from.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;

/// Input channels per sample point: 3 spatial + 6 feature channels.
pub const SAMPLE_WIDTH: usize = 9;
/// Feature channels (`D`) carried alongside the spatial coordinates.
pub const FEATURE_CHANNELS: usize = 6;

/// One ALS return.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub return_number: u32,
    pub num_returns: u32,
    pub label: Option<usize>,
}

impl PointRecord {
    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.z, self.intensity].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("point record {self:?}")));
        }
        if self.return_number < 1 || self.num_returns < self.return_number {
            return Err(Error::InvalidArgument(format!(
                "return {} of {} is not a valid return ordinal",
                self.return_number, self.num_returns
            )));
        }
        Ok(())
    }

    pub fn xyz(&self) -> Point3 {
        [self.x, self.y, self.z]
    }
}

/// Contents of a `.pts` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PtsFile {
    pub records: Vec<PointRecord>,
    /// From an optional `# classes: a b c` comment line.
    pub class_names: Option<Vec<String>>,
    /// Extra trailing columns (e.g. predicted labels) beyond the seven standard ones.
    pub extra: Vec<Vec<f64>>,
}

/// Parses whitespace-separated `x y z intensity return_number num_returns [label] [extra...]`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_pts(text: &str, path: &Path) -> Result<PtsFile> {
    let mut out = PtsFile::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(names) = comment.trim().strip_prefix("classes:") {
                out.class_names = Some(names.split_whitespace().map(String::from).collect());
            }
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 6 {
            return Err(err(format!("expected at least 6 columns, found {}", cols.len())));
        }
        let float = |i: usize| -> Result<f64> {
            cols[i]
                .parse::<f64>()
                .map_err(|_| err(format!("column {}: `{}` is not a number", i + 1, cols[i])))
        };
        let ordinal = |i: usize| -> Result<u32> {
            let v = float(i)?;
            if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                return Err(err(format!("column {}: `{}` is not an ordinal", i + 1, cols[i])));
            }
            Ok(v as u32)
        };
        let label = if cols.len() > 6 {
            let v = float(6)?;
            if v.fract() != 0.0 || v < 0.0 {
                return Err(err(format!("column 7: `{}` is not a class id", cols[6])));
            }
            Some(v as usize)
        } else {
            None
        };
        let record = PointRecord {
            x: float(0)?,
            y: float(1)?,
            z: float(2)?,
            intensity: float(3)?,
            return_number: ordinal(4)?,
            num_returns: ordinal(5)?,
            label,
        };
        record.validate().map_err(|e| err(e.to_string()))?;
        out.extra.push((7..cols.len()).map(float).collect::<Result<_>>()?);
        out.records.push(record);
    }
    Ok(out)
}

pub fn read_pts(path: impl AsRef<Path>) -> Result<PtsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_pts(&text, path)
}

fn push_record(out: &mut String, r: &PointRecord) {
    let _ = write!(
        out,
        "{} {} {} {} {} {}",
        r.x, r.y, r.z, r.intensity, r.return_number, r.num_returns
    );
    if let Some(l) = r.label {
        let _ = write!(out, " {l}");
    }
}

/// Serializes records; `extra` columns (if any) follow the label column.
pub fn format_pts(records: &[PointRecord], class_names: Option<&[String]>, extra: &[Vec<usize>]) -> String {
    let mut out = String::new();
    if let Some(names) = class_names {
        let _ = writeln!(out, "# classes: {}", names.join(" "));
    }
    for (i, r) in records.iter().enumerate() {
        push_record(&mut out, r);
        for col in extra {
            let _ = write!(out, " {}", col[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_pts(
    path: impl AsRef<Path>,
    records: &[PointRecord],
    class_names: Option<&[String]>,
    extra: &[Vec<usize>],
) -> Result<()> {
    fs::write(path, format_pts(records, class_names, extra))?;
    Ok(())
}

/// Preprocessing thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Window edge length in meters.
    pub block_size: f64,
    /// Window shift in meters for training.
    pub stride: f64,
    /// Training windows with fewer points are dropped.
    pub min_points: usize,
    /// Points drawn per sample.
    pub sample_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            block_size: 30.0,
            stride: 10.0,
            min_points: 250,
            sample_points: 1024,
        }
    }
}

/// Per-block min/max of x, y, z and intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl NormState {
    fn forward(&self, i: usize, v: f64) -> f64 {
        let range = self.max[i] - self.min[i];
        if range > 0.0 {
            (v - self.min[i]) / range
        } else {
            0.0
        }
    }

    fn inverse(&self, i: usize, v: f64) -> f64 {
        let range = self.max[i] - self.min[i];
        if range > 0.0 {
            v * range + self.min[i]
        } else {
            self.min[i]
        }
    }
}

/// A square window of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub xmin: f64,
    pub ymin: f64,
    pub size: f64,
    pub records: Vec<PointRecord>,
    /// Index of each record in the partitioned input.
    pub source_ids: Vec<usize>,
    /// Present once the block has been normalized.
    pub norm: Option<NormState>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn anchor_count(extent: f64, size: f64, stride: f64) -> usize {
    if extent <= size {
        1
    } else {
        ((extent - size) / stride - 1e-9).ceil() as usize + 1
    }
}

fn in_window(v: f64, anchor: f64, size: f64, last: bool) -> bool {
    v >= anchor && (v < anchor + size || (last && v <= anchor + size))
}

/// Slides a `block_size` window over the area with the given stride, anchored
/// at the minimum corner. Empty windows are never returned; with `drop_sparse`,
/// windows holding fewer than `min_points` records are removed too.
pub fn block_partition(
    points: &[PointRecord],
    block_size: f64,
    stride: f64,
    min_points: usize,
    drop_sparse: bool,
) -> Result<Vec<Block>> {
    if points.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    if !(block_size > 0.0) || !(stride > 0.0) || stride > block_size {
        return Err(Error::InvalidArgument(format!(
            "need 0 < stride <= block_size, got stride {stride} and block size {block_size}"
        )));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let nx = anchor_count(xmax - xmin, block_size, stride);
    let ny = anchor_count(ymax - ymin, block_size, stride);
    let mut blocks = Vec::new();
    for iy in 0..ny {
        let ay = ymin + iy as f64 * stride;
        for ix in 0..nx {
            let ax = xmin + ix as f64 * stride;
            let (last_x, last_y) = (ix + 1 == nx, iy + 1 == ny);
            let mut records = Vec::new();
            let mut source_ids = Vec::new();
            for (i, p) in points.iter().enumerate() {
                if in_window(p.x, ax, block_size, last_x) && in_window(p.y, ay, block_size, last_y) {
                    records.push(p.clone());
                    source_ids.push(i);
                }
            }
            if records.is_empty() || (drop_sparse && records.len() < min_points) {
                continue;
            }
            blocks.push(Block {
                xmin: ax,
                ymin: ay,
                size: block_size,
                records,
                source_ids,
                norm: None,
            });
        }
    }
    Ok(blocks)
}

/// Test-time partition: non-overlapping windows, nothing dropped.
pub fn tile_partition(points: &[PointRecord], block_size: f64) -> Result<Vec<Block>> {
    block_partition(points, block_size, block_size, 0, false)
}

/// Min-max normalizes x, y, z and intensity to `[0, 1]` within the block.
/// A zero-range channel maps to 0.
pub fn normalize_block(block: &Block) -> Result<Block> {
    if block.is_empty() {
        return Err(Error::Empty("block"));
    }
    let mut min = [f64::INFINITY; 4];
    let mut max = [f64::NEG_INFINITY; 4];
    for r in &block.records {
        for (i, v) in [r.x, r.y, r.z, r.intensity].into_iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    let norm = NormState { min, max };
    let records = block
        .records
        .iter()
        .map(|r| PointRecord {
            x: norm.forward(0, r.x),
            y: norm.forward(1, r.y),
            z: norm.forward(2, r.z),
            intensity: norm.forward(3, r.intensity),
            ..r.clone()
        })
        .collect();
    Ok(Block {
        records,
        norm: Some(norm),
        ..block.clone()
    })
}

/// Inverse of [`normalize_block`]; a block that was never normalized is returned as is.
pub fn denormalize_block(block: &Block) -> Block {
    let Some(norm) = &block.norm else {
        return block.clone();
    };
    let records = block
        .records
        .iter()
        .map(|r| PointRecord {
            x: norm.inverse(0, r.x),
            y: norm.inverse(1, r.y),
            z: norm.inverse(2, r.z),
            intensity: norm.inverse(3, r.intensity),
            ..r.clone()
        })
        .collect();
    Block {
        records,
        norm: None,
        ..block.clone()
    }
}

/// Fixed-size network input drawn from one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `n × 9`: spatial `x y z`, then `x y z intensity return num_returns`.
    pub features: Vec<f64>,
    /// Present when every drawn record carries a label.
    pub labels: Option<Vec<usize>>,
    /// Index into the block's records for each row.
    pub origin_ids: Vec<usize>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.origin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_ids.is_empty()
    }

    pub fn coords(&self) -> Vec<Point3> {
        self.features.chunks(SAMPLE_WIDTH).map(|r| [r[0], r[1], r[2]]).collect()
    }

    /// The six feature channels of each row, row-major `n × 6`.
    pub fn feature_channels(&self) -> Vec<f64> {
        self.features
            .chunks(SAMPLE_WIDTH)
            .flat_map(|r| r[3..].iter().copied())
            .collect()
    }

    pub fn from_block(block: &Block, origin_ids: Vec<usize>) -> Self {
        let mut features = Vec::with_capacity(origin_ids.len() * SAMPLE_WIDTH);
        let mut labels = Vec::with_capacity(origin_ids.len());
        let mut labelled = true;
        for &i in &origin_ids {
            let r = &block.records[i];
            features.extend_from_slice(&[
                r.x,
                r.y,
                r.z,
                r.x,
                r.y,
                r.z,
                r.intensity,
                r.return_number as f64,
                r.num_returns as f64,
            ]);
            match r.label {
                Some(l) => labels.push(l),
                None => labelled = false,
            }
        }
        Self {
            features,
            labels: labelled.then_some(labels),
            origin_ids,
        }
    }
}

/// Draws `n` points: without replacement when the block is large enough,
/// otherwise every point once plus uniform draws with replacement.
pub fn sample_fixed<R: Rng + ?Sized>(block: &Block, n: usize, rng: &mut R) -> Result<Sample> {
    if block.is_empty() {
        return Err(Error::Empty("block"));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let m = block.len();
    let ids = if m >= n {
        index::sample(rng, m, n).into_vec()
    } else {
        let mut ids: Vec<usize> = (0..m).collect();
        ids.extend((m..n).map(|_| rng.random_range(0..m)));
        ids
    };
    Ok(Sample::from_block(block, ids))
}

/// Samples covering every point of the block at least once, for prediction.
pub fn coverage_samples<R: Rng + ?Sized>(block: &Block, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
    if block.len() <= n {
        return Ok(vec![sample_fixed(block, n, rng)?]);
    }
    let m = block.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(n)
        .map(|chunk| {
            let mut ids = chunk.to_vec();
            ids.extend((chunk.len()..n).map(|_| rng.random_range(0..m)));
            Sample::from_block(block, ids)
        })
        .collect())
}

/// Collects per-point predictions from block samples back into input order.
#[derive(Clone, Debug)]
pub struct LabelScatter {
    labels: Vec<Option<usize>>,
}

impl LabelScatter {
    pub fn new(points: usize) -> Self {
        Self {
            labels: vec![None; points],
        }
    }

    /// Later assignments overwrite earlier ones.
    pub fn assign(&mut self, block: &Block, sample: &Sample, predicted: &[usize]) {
        for (&origin, &label) in sample.origin_ids.iter().zip(predicted) {
            self.labels[block.source_ids[origin]] = Some(label);
        }
    }

    pub fn finish(self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::InvalidArgument(format!("point {i} received no prediction"))))
            .collect()
    }
}

//! Dataset directories: `labels.csv` (`subject_id,label,modality`) plus one
//! directory per subject holding `frame_000.pgm` … (or `.mtsv`) files.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::preprocess::{prepare_frame, Image, WindowSpec};
use super::record::{Clip, Modality, SubjectRecord, MAX_FRAMES};
use super::synth::{synth_subject_with, SynthConfig};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

pub const LABELS_FILE: &str = "labels.csv";
pub const THREADS_VAR: &str = "MTSNET_THREADS";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRow {
    pub subject_id: String,
    pub label: u8,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FrameFormat {
    #[default]
    Pgm,
    Mtsv,
}

impl FrameFormat {
    fn extension(self) -> &'static str {
        match self {
            FrameFormat::Pgm => "pgm",
            FrameFormat::Mtsv => "mtsv",
        }
    }
}

/// How to read the values of MTSV frames. PGM frames are always 8-bit
/// pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameValues {
    /// Already windowed intensities in `0..=255`.
    Pixels,
    /// Raw Hounsfield units, windowed on load.
    Hounsfield(WindowSpec),
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Loader worker count: `MTSNET_THREADS` when set, else the core count.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `job` over `0..n` on up to `workers` threads, delivering results
/// through a bounded queue. Output order matches input order; on failure
/// the error of the lowest failing index is returned.
pub fn parallel_map<T, F>(n: usize, workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(2 * workers);
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, job) = (&next, &job);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                if tx.send((i, job(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            slots[i] = Some(r);
        }
    });
    slots.into_iter().map(|r| r.expect("every index processed")).collect()
}

pub fn read_labels(dir: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let path = dir.as_ref().join(LABELS_FILE);
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| data_err(&path, e))?;
    let header = reader.headers().map_err(|e| data_err(&path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["subject_id", "label", "modality"] {
        return Err(data_err(&path, format!("header must be subject_id,label,modality, got {:?}", header)));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| data_err(&path, e))?;
        let line = i + 2;
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(data_err(&path, format!("line {line}: label {other:?} is not 0 or 1"))),
        };
        let modality = rec[2].parse().map_err(|e| data_err(&path, format!("line {line}: {e}")))?;
        let subject_id = rec[0].to_string();
        if subject_id.is_empty() || subject_id.contains(['/', '\\']) || subject_id.starts_with('.') {
            return Err(data_err(&path, format!("line {line}: bad subject id {subject_id:?}")));
        }
        if !seen.insert(subject_id.clone()) {
            return Err(data_err(&path, format!("line {line}: duplicate subject {subject_id}")));
        }
        rows.push(LabelRow { subject_id, label, modality });
    }
    Ok(rows)
}

pub fn write_labels(dir: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["subject_id", "label", "modality"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.subject_id.as_str(), &r.label.to_string(), &r.modality.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.as_ref().join(LABELS_FILE), bytes)?;
    Ok(())
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&img.pixels, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Data(format!("bad PGM: {e}")))?;
    let gray = img.as_luma8().ok_or_else(|| Error::Data("PGM must be 8-bit grayscale (P5, maxval 255)".into()))?;
    Image::new(gray.height() as usize, gray.width() as usize, gray.as_raw().clone())
}

fn frame_path(subject: &Path, i: usize, format: FrameFormat) -> PathBuf {
    subject.join(format!("frame_{i:03}.{}", format.extension()))
}

pub fn read_frame(path: &Path, values: FrameValues) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    if path.extension().is_some_and(|e| e == "pgm") {
        return decode_pgm(&bytes).map_err(|e| data_err(path, e));
    }
    let t: Tensor<f32> = io::decode(&bytes).map_err(|e| data_err(path, e))?;
    if t.rank() != 2 {
        return Err(data_err(path, format!("frame tensor must be [H, W], got {:?}", t.dims())));
    }
    let pixels = match values {
        FrameValues::Pixels => t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
        FrameValues::Hounsfield(w) => super::preprocess::hu_window(t.data(), w),
    };
    Image::new(t.dims()[0], t.dims()[1], pixels)
}

pub fn read_subject(dir: impl AsRef<Path>, row: &LabelRow, values: FrameValues) -> Result<SubjectRecord> {
    let subject = dir.as_ref().join(&row.subject_id);
    if !subject.is_dir() {
        return Err(data_err(&subject, "subject directory missing"));
    }
    let mut frames = Vec::new();
    for i in 0..=MAX_FRAMES {
        let found = [FrameFormat::Pgm, FrameFormat::Mtsv].into_iter().map(|f| frame_path(&subject, i, f)).find(|p| p.is_file());
        match found {
            Some(p) => frames.push(read_frame(&p, values)?),
            None => break,
        }
    }
    let record = SubjectRecord { subject_id: row.subject_id.clone(), frames, label: row.label, modality: row.modality };
    record.validate()?;
    Ok(record)
}

pub fn write_subject(dir: impl AsRef<Path>, record: &SubjectRecord, format: FrameFormat) -> Result<()> {
    let subject = dir.as_ref().join(&record.subject_id);
    fs::create_dir_all(&subject)?;
    for (i, f) in record.frames.iter().enumerate() {
        let bytes = match format {
            FrameFormat::Pgm => encode_pgm(f)?,
            FrameFormat::Mtsv => {
                let values = f.pixels.iter().map(|&p| p as f32).collect();
                io::encode(&Tensor::new(&[f.height, f.width], values)?)
            }
        };
        fs::write(frame_path(&subject, i, format), bytes)?;
    }
    Ok(())
}

/// Writes `n` synthetic subjects plus `labels.csv`; a `pos_frac` share of
/// them (rounded half up) is positive, placed by a seeded shuffle.
pub fn write_synth_dataset(
    out: impl AsRef<Path>,
    n: usize,
    pos_frac: f64,
    seed: u64,
    cfg: SynthConfig,
    workers: usize,
) -> Result<Vec<LabelRow>> {
    if !(0.0..=1.0).contains(&pos_frac) {
        return Err(Error::Config(format!("positive fraction {pos_frac} outside [0, 1]")));
    }
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = (n as f64 * pos_frac + 0.5).floor() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let width = n.saturating_sub(1).to_string().len().max(4);
    let rows: Vec<LabelRow> = (0..n)
        .map(|i| LabelRow { subject_id: format!("subj_{i:0width$}"), label: labels[i], modality: Modality::Ct })
        .collect();
    parallel_map(n, workers, |i| {
        let mut rec = synth_subject_with(seeds[i], labels[i], cfg);
        rec.subject_id = rows[i].subject_id.clone();
        write_subject(out, &rec, FrameFormat::Pgm)
    })?;
    write_labels(out, &rows)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub window: WindowSpec,
    /// Side of the centered square crop.
    pub crop: usize,
    /// Average-downsampling factor applied after the crop.
    pub factor: usize,
    pub format: FrameFormat,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { window: WindowSpec::default(), crop: 256, factor: 2, format: FrameFormat::Pgm }
    }
}

/// Windows (MTSV frames in HU), crops and downsamples every subject of
/// `input` into a model-ready dataset at `output`.
pub fn preprocess_dataset(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    opts: PreprocessOptions,
    workers: usize,
) -> Result<usize> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let rows = read_labels(input)?;
    fs::create_dir_all(output)?;
    parallel_map(rows.len(), workers, |i| {
        let mut rec = read_subject(input, &rows[i], FrameValues::Hounsfield(opts.window))?;
        rec.frames = rec.frames.iter().map(|f| prepare_frame(f, opts.crop, opts.factor)).collect::<Result<_>>()?;
        write_subject(output, &rec, opts.format)
    })?;
    write_labels(output, &rows)?;
    Ok(rows.len())
}

/// A loaded subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub subject_id: String,
    pub label: u8,
    pub clip: Clip,
}

/// In-memory clips of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every subject listed in `labels.csv`, padding to `frames` and
    /// averaging frames down by `factor`.
    pub fn load(dir: impl AsRef<Path>, frames: usize, factor: usize, workers: usize) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(data_err(dir, "dataset directory missing"));
        }
        let rows = read_labels(dir)?;
        let samples = parallel_map(rows.len(), workers, |i| {
            let rec = read_subject(dir, &rows[i], FrameValues::Pixels)?;
            Sample::from_record(&rec, frames, factor)
        })?;
        Ok(Self { samples })
    }

    pub fn from_records(records: &[SubjectRecord], frames: usize, factor: usize) -> Result<Self> {
        let samples = records.iter().map(|r| Sample::from_record(r, frames, factor)).collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Common clip extent, or a data error when clips differ.
    pub fn extent(&self) -> Result<[usize; 3]> {
        let first = self.samples.first().ok_or_else(|| Error::Data("empty dataset".into()))?.clip.extent();
        if let Some(s) = self.samples.iter().find(|s| s.clip.extent() != first) {
            return Err(Error::Data(format!(
                "{} has extent {:?}, others {first:?}",
                s.subject_id,
                s.clip.extent()
            )));
        }
        Ok(first)
    }

    /// `[B, 1, L, H, W]` inputs and `{0, 1}` targets for the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<f32>)> {
        let extent = self.samples.get(*indices.first().ok_or_else(|| Error::Data("empty batch".into()))?)
            .ok_or_else(|| Error::Data("batch index out of range".into()))?
            .clip
            .extent();
        let per = extent.iter().product::<usize>();
        let mut data = vec![0.0f32; per * indices.len()];
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &i) in data.chunks_mut(per).zip(indices) {
            let s = self.samples.get(i).ok_or_else(|| Error::Data("batch index out of range".into()))?;
            if s.clip.extent() != extent {
                return Err(Error::Data(format!("{} has extent {:?}, batch {extent:?}", s.subject_id, s.clip.extent())));
            }
            s.clip.write_unit(slot);
            labels.push(s.label as f32);
        }
        let x = Tensor::new(&[indices.len(), 1, extent[0], extent[1], extent[2]], data)?;
        Ok((x, labels))
    }
}

impl Sample {
    pub fn from_record(rec: &SubjectRecord, frames: usize, factor: usize) -> Result<Self> {
        let clip = Clip::assemble(rec, frames)?.downsampled(factor).map_err(|e| match e {
            Error::Config(m) => Error::Data(format!("{}: {m}", rec.subject_id)),
            other => other,
        })?;
        Ok(Self { subject_id: rec.subject_id.clone(), label: rec.label, clip })
    }
}

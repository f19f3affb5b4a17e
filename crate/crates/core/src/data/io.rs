//! Dataset container (see [`crate::container`]) and CSV ingestion.
//!
//! Payload blocks, in order:
//! 1. `image_feats`: `n × d_img` f64, row-major
//! 2. `text_feats`: `n_text × d_txt` f64, row-major
//! 3. `pair_of`: `n` u64
//! 4. `true_of`: `n` u64
//! 5. `latent_class`: `n` u64, present only when `has_latent_class`
//! 6. split indices: `split[0]` train, `split[1]` val, `split[2]` test, u64 each

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PairDataset, SplitSpec};
use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{PcsrError, Result};
use crate::numerics::DenseMatrix;

pub const DATASET_MAGIC: &[u8; 8] = b"PCSRDATA";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub n: usize,
    pub n_text: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub captions_per_image: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub noise_ratio: f64,
    pub has_latent_class: bool,
    pub split: [usize; 3],
}

impl DatasetHeader {
    pub fn of(ds: &PairDataset) -> Self {
        DatasetHeader {
            schema_version: SCHEMA_VERSION,
            n: ds.len(),
            n_text: ds.text_feats.rows(),
            d_img: ds.d_img(),
            d_txt: ds.d_txt(),
            captions_per_image: ds.captions_per_image,
            n_classes: ds.n_classes,
            seed: ds.seed,
            noise_ratio: ds.noise_ratio,
            has_latent_class: ds.latent_class.is_some(),
            split: [ds.split.train.len(), ds.split.val.len(), ds.split.test.len()],
        }
    }
}

pub fn encode_dataset(ds: &PairDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = ContainerWriter::new(DATASET_MAGIC, &DatasetHeader::of(ds))?;
    w.f64s(ds.image_feats.as_slice());
    w.f64s(ds.text_feats.as_slice());
    w.u64s(ds.pair_of.iter().map(|&v| v as u64));
    w.u64s(ds.true_of.iter().map(|&v| v as u64));
    if let Some(classes) = &ds.latent_class {
        w.u64s(classes.iter().map(|&v| v as u64));
    }
    for part in [&ds.split.train, &ds.split.val, &ds.split.test] {
        w.u64s(part.iter().map(|&v| v as u64));
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PairDataset> {
    let (mut r, h): (_, DatasetHeader) = ContainerReader::open(bytes, DATASET_MAGIC)?;
    if h.schema_version != SCHEMA_VERSION {
        return Err(PcsrError::format(
            12,
            format!("unsupported schema version {}", h.schema_version),
        ));
    }
    if h.n == 0 {
        return Err(PcsrError::EmptyDataset);
    }
    let header_end = r.offset();
    if h.split.iter().sum::<usize>() != h.n {
        return Err(PcsrError::format(header_end, "split sizes do not sum to n"));
    }
    let image = r.f64s(h.n * h.d_img, "image_feats")?;
    let text = r.f64s(h.n_text * h.d_txt, "text_feats")?;
    let to_usize = |v: Vec<u64>| v.into_iter().map(|x| x as usize).collect::<Vec<_>>();
    let pair_of = to_usize(r.u64s(h.n, "pair_of")?);
    let true_of = to_usize(r.u64s(h.n, "true_of")?);
    let latent_class = if h.has_latent_class {
        Some(to_usize(r.u64s(h.n, "latent_class")?))
    } else {
        None
    };
    let train = to_usize(r.u64s(h.split[0], "split.train")?);
    let val = to_usize(r.u64s(h.split[1], "split.val")?);
    let test = to_usize(r.u64s(h.split[2], "split.test")?);
    r.finish()?;
    let ds = PairDataset {
        image_feats: DenseMatrix::from_vec(h.n, h.d_img, image)?,
        text_feats: DenseMatrix::from_vec(h.n_text, h.d_txt, text)?,
        pair_of,
        true_of,
        captions_per_image: h.captions_per_image,
        latent_class,
        n_classes: h.n_classes,
        split: SplitSpec { train, val, test },
        seed: h.seed,
        noise_ratio: h.noise_ratio,
    };
    ds.validate().map_err(|e| PcsrError::format(header_end, format!("inconsistent payload: {e}")))?;
    Ok(ds)
}

pub fn save_dataset(ds: &PairDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairDataset> {
    decode_dataset(&std::fs::read(path)?)
}

fn read_csv_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PcsrError::format(0, format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            PcsrError::format(offset, format!("{}: {e}", path.display()))
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            // a non-numeric first line is a header
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(PcsrError::format(
                    offset,
                    format!("{} line {}: {e}", path.display(), line + 1),
                ))
            }
        }
    }
    DenseMatrix::from_rows(&rows)
        .map_err(|e| PcsrError::format(0, format!("{}: {e}", path.display())))
}

/// Builds a dataset from externally produced features, one sample per CSV row.
///
/// Image row `i` is paired with its captions `i·c .. i·c + c`, where `c` is the
/// ratio of text rows to image rows. The split is contiguous 80/10/10.
pub fn load_csv_features(
    image_csv: impl AsRef<Path>,
    text_csv: impl AsRef<Path>,
) -> Result<PairDataset> {
    let images = read_csv_matrix(image_csv.as_ref())?;
    let texts = read_csv_matrix(text_csv.as_ref())?;
    let n = images.rows();
    if n == 0 {
        return Err(PcsrError::EmptyDataset);
    }
    if texts.rows() % n != 0 || texts.rows() == 0 {
        return Err(PcsrError::config(format!(
            "{} text rows is not a multiple of {n} image rows",
            texts.rows()
        )));
    }
    let cpi = texts.rows() / n;
    let true_of: Vec<usize> = (0..n).map(|i| i * cpi).collect();
    let ds = PairDataset {
        image_feats: images,
        text_feats: texts,
        pair_of: true_of.clone(),
        true_of,
        captions_per_image: cpi,
        latent_class: None,
        n_classes: 0,
        split: SplitSpec::contiguous(n, 0.8, 0.1)?,
        seed: 0,
        noise_ratio: 0.0,
    };
    ds.validate()?;
    Ok(ds)
}

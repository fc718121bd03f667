use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FedHelpError, Result};
use crate::tensor::Tensor;

/// Feature matrix with integer labels and globally unique datum ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, ids: Vec<u64>, num_classes: usize) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if labels.len() != n || ids.len() != n {
            return Err(FedHelpError::Data(format!(
                "{} rows but {} labels and {} ids",
                n,
                labels.len(),
                ids.len()
            )));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(FedHelpError::Data(format!("label outside 0..{num_classes}")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    /// Rows `idx` as a feature batch plus their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let x = Tensor::new(vec![idx.len(), d], data).expect("row width is consistent");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        let (features, labels) = self.batch(idx);
        LabeledDataset {
            features,
            labels,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

/// Header of a dataset dump; the f64 payload follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub generator_version: u32,
}

pub const GENERATOR_VERSION: u32 = 1;

/// `u32` header length · header JSON · features, labels and ids as LE f64.
pub fn dump(ds: &LabeledDataset, seed: u64, w: &mut impl Write) -> Result<()> {
    let header = DumpHeader {
        shape: ds.features.shape().to_vec(),
        classes: ds.num_classes,
        seed,
        generator_version: GENERATOR_VERSION,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let payload = ds
        .features
        .data()
        .iter()
        .copied()
        .chain(ds.labels.iter().map(|&l| l as f64))
        .chain(ds.ids.iter().map(|&i| i as f64));
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load(r: &mut impl Read) -> Result<(LabeledDataset, DumpHeader)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| FedHelpError::format("dataset", "truncated header"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| FedHelpError::format("dataset", "truncated header"))?;
    let header: DumpHeader = serde_json::from_slice(&json)?;
    if header.generator_version != GENERATOR_VERSION {
        return Err(FedHelpError::format(
            "dataset",
            format!("generator version {}", header.generator_version),
        ));
    }
    let n = header.shape.first().copied().unwrap_or(0);
    let numel: usize = header.shape.iter().product();
    let mut read_f64 = || -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| FedHelpError::format("dataset", "truncated payload"))?;
        Ok(f64::from_le_bytes(b))
    };
    let features = (0..numel).map(|_| read_f64()).collect::<Result<Vec<_>>>()?;
    let labels = (0..n)
        .map(|_| read_f64().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..n)
        .map(|_| read_f64().map(|v| v as u64))
        .collect::<Result<Vec<_>>>()?;
    let ds = LabeledDataset::new(
        Tensor::new(header.shape.clone(), features)?,
        labels,
        ids,
        header.classes,
    )?;
    Ok((ds, header))
}

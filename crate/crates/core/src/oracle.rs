//! Frozen teacher models standing in for foundation-model APIs, and the
//! cache that makes their use one-time.
//!
//! Every `(public datum, oracle)` pair is evaluated once during warm-up.
//! After that, training reads probabilities from the cache only; a missing
//! id is an error, never a silent re-query.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::error::{FedHelpError, Result};
use crate::losses::OracleBatch;
use crate::model::Network;
use crate::tensor::Tensor;

/// A frozen model answering probability queries.
#[derive(Debug)]
pub struct OracleModel {
    id: String,
    network: Network,
    evaluations: AtomicU64,
}

impl OracleModel {
    pub fn new(id: impl Into<String>, network: Network) -> Self {
        OracleModel {
            id: id.into(),
            network,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn classes(&self) -> usize {
        self.network.spec().classes
    }

    /// Raw evaluations served so far (one per datum).
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Probabilities for a batch, flattened per datum (`K·C` values each,
    /// with `K` pixels for segmentation and 1 otherwise).
    pub fn query(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        let logits = self.network.predict(inputs)?;
        let rows = inputs.shape()[0] as u64;
        self.evaluations.fetch_add(rows, Ordering::Relaxed);
        Ok(softmax_rows(logits.data(), self.classes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Trailer {
    oracle_ids: Vec<String>,
    rows_per_datum: usize,
    query_counter: BTreeMap<String, u64>,
}

/// Cached oracle probabilities keyed by public datum id.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCache {
    oracle_ids: Vec<String>,
    classes: usize,
    rows_per_datum: usize,
    order: Vec<u64>,
    /// Per datum: `M` blocks of `rows_per_datum · classes` probabilities.
    entries: HashMap<u64, Vec<f64>>,
    query_counter: BTreeMap<String, u64>,
}

const CACHE_MAGIC: &[u8; 4] = b"FHOC";
const CACHE_VERSION: u32 = 1;
const WARMUP_CHUNK: usize = 64;

impl OracleCache {
    pub fn empty(oracle_ids: Vec<String>, classes: usize, rows_per_datum: usize) -> Self {
        let query_counter = oracle_ids.iter().map(|id| (id.clone(), 0)).collect();
        OracleCache {
            oracle_ids,
            classes,
            rows_per_datum,
            order: Vec::new(),
            entries: HashMap::new(),
            query_counter,
        }
    }

    /// Evaluates every oracle on every public datum exactly once.
    pub fn warm_up(oracles: &[OracleModel], ids: &[u64], inputs: &Tensor, classes: usize) -> Result<Self> {
        let rows_per_datum = match inputs.shape().len() {
            4 => inputs.shape()[1] * inputs.shape()[2],
            _ => 1,
        };
        let mut cache = Self::empty(
            oracles.iter().map(|o| o.id().to_string()).collect(),
            classes,
            rows_per_datum,
        );
        cache.fill(oracles, ids, inputs)?;
        Ok(cache)
    }

    /// Evaluates only the data not already cached.
    pub fn fill(&mut self, oracles: &[OracleModel], ids: &[u64], inputs: &Tensor) -> Result<()> {
        if oracles.len() != self.oracle_ids.len()
            || oracles.iter().zip(&self.oracle_ids).any(|(o, id)| o.id() != id)
        {
            return Err(FedHelpError::Oracle("oracle set differs from cache".into()));
        }
        if let Some(o) = oracles.iter().find(|o| o.classes() != self.classes) {
            return Err(FedHelpError::Oracle(format!(
                "oracle {} outputs {} classes, public label space has {}",
                o.id(),
                o.classes(),
                self.classes
            )));
        }
        if inputs.shape().first() != Some(&ids.len()) {
            return Err(FedHelpError::shape("warm_up", inputs.shape(), &[ids.len()]));
        }
        let missing: Vec<usize> = (0..ids.len())
            .filter(|&i| !self.entries.contains_key(&ids[i]))
            .collect();
        let width = self.rows_per_datum * self.classes;
        let datum_len = inputs.numel() / ids.len().max(1);
        for chunk in missing.chunks(WARMUP_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * datum_len);
            for &i in chunk {
                data.extend_from_slice(&inputs.data()[i * datum_len..(i + 1) * datum_len]);
            }
            let mut shape = inputs.shape().to_vec();
            shape[0] = chunk.len();
            let batch = Tensor::new(shape, data)?;
            let mut per_datum = vec![Vec::with_capacity(oracles.len() * width); chunk.len()];
            for o in oracles {
                let probs = o.query(&batch)?;
                for (slot, p) in per_datum.iter_mut().zip(probs.chunks(width)) {
                    slot.extend_from_slice(p);
                }
                *self.query_counter.entry(o.id().to_string()).or_default() += chunk.len() as u64;
            }
            for (&i, probs) in chunk.iter().zip(per_datum) {
                self.order.push(ids[i]);
                self.entries.insert(ids[i], probs);
            }
        }
        Ok(())
    }

    pub fn num_apis(&self) -> usize {
        self.oracle_ids.len()
    }

    pub fn oracle_ids(&self) -> &[String] {
        &self.oracle_ids
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Number of cached `(datum, oracle)` pairs.
    pub fn num_entries(&self) -> usize {
        self.order.len() * self.oracle_ids.len()
    }

    pub fn query_counter(&self) -> &BTreeMap<String, u64> {
        &self.query_counter
    }

    pub fn total_queries(&self) -> u64 {
        self.query_counter.values().sum()
    }

    /// Probabilities of one oracle for one datum.
    pub fn entry(&self, datum_id: u64, oracle: usize) -> Result<&[f64]> {
        let probs = self
            .entries
            .get(&datum_id)
            .ok_or(FedHelpError::CacheMiss { datum_id })?;
        let width = self.rows_per_datum * self.classes;
        Ok(&probs[oracle * width..(oracle + 1) * width])
    }

    /// Pure cache read: `[B × M × K·C]`.
    pub fn get_distributions(&self, datum_ids: &[u64]) -> Result<OracleBatch> {
        let width = self.rows_per_datum * self.classes;
        let mut data = Vec::with_capacity(datum_ids.len() * self.num_apis() * width);
        for &id in datum_ids {
            data.extend_from_slice(
                self.entries
                    .get(&id)
                    .ok_or(FedHelpError::CacheMiss { datum_id: id })?,
            );
        }
        Ok(OracleBatch {
            dists: Tensor::new(vec![datum_ids.len(), self.num_apis(), width], data)?,
            classes: self.classes,
        })
    }

    /// `FHOC` · version u32 · M u32 · P u64 · C_pub u32, then one record per
    /// (datum, oracle): datum id u64, oracle index u16, probabilities as LE
    /// f64. A JSON trailer with oracle ids and counters runs to end of file.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_apis() as u32).to_le_bytes())?;
        w.write_all(&(self.order.len() as u64).to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        for &id in &self.order {
            for m in 0..self.num_apis() {
                w.write_all(&id.to_le_bytes())?;
                w.write_all(&(m as u16).to_le_bytes())?;
                for p in self.entry(id, m)? {
                    w.write_all(&p.to_le_bytes())?;
                }
            }
        }
        let trailer = Trailer {
            oracle_ids: self.oracle_ids.clone(),
            rows_per_datum: self.rows_per_datum,
            query_counter: self.query_counter.clone(),
        };
        serde_json::to_writer(&mut *w, &trailer)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(4)? != CACHE_MAGIC {
            return Err(FedHelpError::format("oracle cache", "bad magic"));
        }
        let version = cur.u32()?;
        if version != CACHE_VERSION {
            return Err(FedHelpError::format(
                "oracle cache",
                format!("unsupported version {version}"),
            ));
        }
        let apis = cur.u32()? as usize;
        let count = cur.u64()? as usize;
        let classes = cur.u32()? as usize;

        // The record width depends on the trailer's rows_per_datum, so read
        // the trailer first.
        let trailer_start = find_trailer(&bytes, cur.pos)
            .ok_or_else(|| FedHelpError::format("oracle cache", "missing trailer"))?;
        let trailer: Trailer = serde_json::from_slice(&bytes[trailer_start..])
            .map_err(|e| FedHelpError::format("oracle cache", format!("trailer: {e}")))?;
        if trailer.oracle_ids.len() != apis {
            return Err(FedHelpError::format("oracle cache", "oracle count mismatch"));
        }
        let width = trailer.rows_per_datum * classes;
        let expected = cur.pos + count * apis * (10 + 8 * width);
        if expected != trailer_start {
            return Err(FedHelpError::format("oracle cache", "truncated records"));
        }
        let mut cache = Self::empty(trailer.oracle_ids, classes, trailer.rows_per_datum);
        cache.query_counter = trailer.query_counter;
        for _ in 0..count {
            let mut probs = Vec::with_capacity(apis * width);
            let mut datum = None;
            for m in 0..apis {
                let id = cur.u64()?;
                let idx = cur.u16()? as usize;
                if idx != m || datum.is_some_and(|d| d != id) {
                    return Err(FedHelpError::format("oracle cache", "records out of order"));
                }
                datum = Some(id);
                for _ in 0..width {
                    probs.push(cur.f64()?);
                }
            }
            if let Some(id) = datum {
                cache.order.push(id);
                cache.entries.insert(id, probs);
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Loads the cache at `path` if present, otherwise warms up and saves.
    pub fn load_or_warm_up(
        path: &Path,
        oracles: &[OracleModel],
        ids: &[u64],
        inputs: &Tensor,
        classes: usize,
    ) -> Result<Self> {
        if path.exists() {
            let mut cache = Self::load(path)?;
            let before = cache.len();
            cache.fill(oracles, ids, inputs)?;
            if cache.len() != before {
                cache.save(path)?;
            }
            Ok(cache)
        } else {
            let cache = Self::warm_up(oracles, ids, inputs, classes)?;
            cache.save(path)?;
            Ok(cache)
        }
    }
}

/// Start of the JSON trailer: the last `{"oracle_ids"` after the header.
fn find_trailer(bytes: &[u8], from: usize) -> Option<usize> {
    const KEY: &[u8] = b"{\"oracle_ids\"";
    (from..bytes.len().saturating_sub(KEY.len() - 1))
        .rev()
        .find(|&i| &bytes[i..i + KEY.len()] == KEY)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FedHelpError::format("oracle cache", "truncated file"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn oracles() -> Vec<OracleModel> {
        (0..2)
            .map(|i| {
                let net = Network::build(&ModelSpec::mlp(&[3, 6, 4]), 10 + i).unwrap();
                OracleModel::new(format!("o{i}"), net)
            })
            .collect()
    }

    fn inputs(p: usize) -> (Vec<u64>, Tensor) {
        let data = (0..p * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        ((100..100 + p as u64).collect(), Tensor::new(vec![p, 3], data).unwrap())
    }

    #[test]
    fn warm_up_counts_and_normalizes() {
        let os = oracles();
        let (ids, x) = inputs(10);
        let cache = OracleCache::warm_up(&os, &ids, &x, 4).unwrap();
        assert_eq!(cache.num_entries(), 20);
        assert_eq!(cache.query_counter().get("o0"), Some(&10));
        assert_eq!(cache.query_counter().get("o1"), Some(&10));
        for &id in &ids {
            for m in 0..2 {
                let s: f64 = cache.entry(id, m).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn refill_is_idempotent() {
        let os = oracles();
        let (ids, x) = inputs(10);
        let mut cache = OracleCache::warm_up(&os, &ids, &x, 4).unwrap();
        let before: u64 = os.iter().map(OracleModel::evaluations).sum();
        cache.fill(&os, &ids, &x).unwrap();
        let after: u64 = os.iter().map(OracleModel::evaluations).sum();
        assert_eq!(before, after);
        assert_eq!(cache.total_queries(), 20);
    }

    #[test]
    fn reads_do_not_query() {
        let os = oracles();
        let (ids, x) = inputs(5);
        let cache = OracleCache::warm_up(&os, &ids, &x, 4).unwrap();
        let a = cache.get_distributions(&ids).unwrap();
        let b = cache.get_distributions(&ids).unwrap();
        assert_eq!(a, b);
        assert_eq!(os[0].evaluations(), 5);
        assert_eq!(cache.get_distributions(&ids[..1]).unwrap().dists.shape(), &[1, 2, 4]);
        assert!(matches!(
            cache.get_distributions(&[7]),
            Err(FedHelpError::CacheMiss { datum_id: 7 })
        ));
    }

    #[test]
    fn class_mismatch_rejected() {
        let os = oracles();
        let (ids, x) = inputs(2);
        assert!(OracleCache::warm_up(&os, &ids, &x, 5).is_err());
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let os = oracles();
        let (ids, x) = inputs(6);
        let cache = OracleCache::warm_up(&os, &ids, &x, 4).unwrap();
        let mut bytes = Vec::new();
        cache.write_to(&mut bytes).unwrap();
        let back = OracleCache::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, cache);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            OracleCache::read_from(&mut bad.as_slice()),
            Err(FedHelpError::Format { .. })
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(OracleCache::read_from(&mut wrong_version.as_slice()).is_err());
        let truncated = &bytes[..40];
        assert!(OracleCache::read_from(&mut &truncated[..]).is_err());
    }
}

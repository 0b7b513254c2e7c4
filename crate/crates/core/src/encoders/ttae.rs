//! TTAE multi-view embedding tables.
//!
//! Layout (little-endian): magic `TTAE`, `u32` version (1), `u32` S, V, D,
//! K, n_domains, then K class names and n_domains domain names (each `u32`
//! length + UTF-8), `i32[S]` labels, `i32[S]` domain ids and
//! `f32[S·V·D]` embeddings, sample-major then view.

use std::fs;
use std::path::Path;

use crate::binio::{put_f32, put_i32, put_str, put_u32, FormatError, FormatErrorKind, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"TTAE";
pub const TTAE_VERSION: u32 = 1;

/// Precomputed image embeddings: `samples × views × dim`, view 0 canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    samples: usize,
    views: usize,
    dim: usize,
    class_names: Vec<String>,
    domain_names: Vec<String>,
    labels: Vec<usize>,
    domain_ids: Vec<usize>,
    data: Vec<f32>,
}

impl EmbeddingDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        samples: usize,
        views: usize,
        dim: usize,
        class_names: Vec<String>,
        domain_names: Vec<String>,
        labels: Vec<usize>,
        domain_ids: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let ds = Self {
            samples,
            views,
            dim,
            class_names,
            domain_names,
            labels,
            domain_ids,
            data,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.views == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "embedding table needs V ≥ 1 and D ≥ 1 (V={}, D={})",
                self.views, self.dim
            )));
        }
        if self.labels.len() != self.samples || self.domain_ids.len() != self.samples {
            return Err(Error::Config("label/domain arrays must have S entries".into()));
        }
        if self.data.len() != self.samples * self.views * self.dim {
            return Err(Error::Config(format!(
                "embedding data has {} values, expected {}",
                self.data.len(),
                self.samples * self.views * self.dim
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= self.class_names.len()) {
            return Err(Error::OutOfRange(format!(
                "sample {i} label {} ≥ K = {}",
                self.labels[i],
                self.class_names.len()
            )));
        }
        if let Some(i) = self
            .domain_ids
            .iter()
            .position(|&d| d >= self.domain_names.len())
        {
            return Err(Error::OutOfRange(format!(
                "sample {i} domain {} ≥ {}",
                self.domain_ids[i],
                self.domain_names.len()
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_ids(&self) -> &[usize] {
        &self.domain_ids
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, sample: usize, view: usize) -> &[f32] {
        let start = (sample * self.views + view) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Rows for every `(sample, view)` pair, sample-major.
    pub fn frozen_embed(&self, samples: &[usize], views: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(samples.len() * views.len() * self.dim);
        for &s in samples {
            if s >= self.samples {
                return Err(Error::OutOfRange(format!(
                    "sample {s} of {}",
                    self.samples
                )));
            }
            for &v in views {
                if v >= self.views {
                    return Err(Error::OutOfRange(format!("view {v} of {}", self.views)));
                }
                data.extend(self.row(s, v).iter().map(|&x| x as f64));
            }
        }
        Ok(Tensor::matrix(samples.len() * views.len(), self.dim, data)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4 + self.samples * 8);
        out.extend_from_slice(MAGIC);
        for v in [
            TTAE_VERSION,
            self.samples as u32,
            self.views as u32,
            self.dim as u32,
            self.class_names.len() as u32,
            self.domain_names.len() as u32,
        ] {
            put_u32(&mut out, v);
        }
        for n in self.class_names.iter().chain(&self.domain_names) {
            put_str(&mut out, n);
        }
        for &l in &self.labels {
            put_i32(&mut out, l as i32);
        }
        for &d in &self.domain_ids {
            put_i32(&mut out, d as i32);
        }
        for &x in &self.data {
            put_f32(&mut out, x);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new("TTAE", buf);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != TTAE_VERSION {
            return Err(r.error(at, FormatErrorKind::UnsupportedVersion(version)));
        }
        let header_at = r.offset();
        let s = r.u32()? as usize;
        let v = r.u32()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n_domains = r.u32()? as usize;
        if v == 0 || d == 0 {
            return Err(r.error(
                header_at,
                FormatErrorKind::OutOfRange(format!("V = {v}, D = {d}")),
            ));
        }
        let mut class_names = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            class_names.push(r.string()?);
        }
        let mut domain_names = Vec::with_capacity(n_domains.min(1 << 16));
        for _ in 0..n_domains {
            domain_names.push(r.string()?);
        }
        let mut labels = Vec::with_capacity(s.min(1 << 24));
        for i in 0..s {
            let at = r.offset();
            let l = r.i32()?;
            if l < 0 || l as usize >= k {
                return Err(r.error(
                    at,
                    FormatErrorKind::OutOfRange(format!("label {l} of sample {i} (K = {k})")),
                ));
            }
            labels.push(l as usize);
        }
        let mut domain_ids = Vec::with_capacity(s.min(1 << 24));
        for i in 0..s {
            let at = r.offset();
            let dm = r.i32()?;
            if dm < 0 || dm as usize >= n_domains {
                return Err(r.error(
                    at,
                    FormatErrorKind::OutOfRange(format!(
                        "domain {dm} of sample {i} ({n_domains} domains)"
                    )),
                ));
            }
            domain_ids.push(dm as usize);
        }
        let at = r.offset();
        let n = s
            .checked_mul(v)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| r.error(at, FormatErrorKind::OutOfRange("S·V·D overflows".into())))?;
        let data = r.f32s(n)?;
        r.finish()?;
        Ok(Self {
            samples: s,
            views: v,
            dim: d,
            class_names,
            domain_names,
            labels,
            domain_ids,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&buf)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingDataset {
        let (s, v, d) = (3, 2, 2);
        let data = (0..s * v * d).map(|i| i as f32 * 0.5).collect();
        EmbeddingDataset::new(
            s,
            v,
            d,
            vec!["a".into(), "b".into()],
            vec!["clean".into()],
            vec![0, 1, 1],
            vec![0, 0, 0],
            data,
        )
        .unwrap()
    }

    #[test]
    fn canonical_row() {
        let t = table();
        let e = t.frozen_embed(&[0], &[0]).unwrap();
        assert_eq!(e.data(), &[0.0, 0.5]);
        let e = t.frozen_embed(&[2], &[1]).unwrap();
        assert_eq!(e.data(), &[5.0, 5.5]);
    }

    #[test]
    fn view_out_of_range() {
        assert!(matches!(
            table().frozen_embed(&[0], &[2]),
            Err(Error::OutOfRange(_))
        ));
        assert!(table().frozen_embed(&[3], &[0]).is_err());
    }

    #[test]
    fn bad_label_rejected_on_decode() {
        let mut buf = table().encode();
        // header 28 + names ("a","b","clean": 5+5+9) = 47; first label
        buf[47..51].copy_from_slice(&5i32.to_le_bytes());
        let err = EmbeddingDataset::decode(&buf).unwrap_err();
        assert_eq!(err.offset, 47);
    }

    #[test]
    fn truncated_data() {
        let buf = table().encode();
        let err = EmbeddingDataset::decode(&buf[..buf.len() - 2]).unwrap_err();
        assert!(matches!(err.kind, FormatErrorKind::Truncated { .. }));
    }
}

//! Phantom dataset: generation, on-disk layout and phenotype normalization.
//!
//! A dataset directory holds
//! - `cines.cpgc`: concatenated cine container records,
//! - `phenotypes.csv`: `id` then one column per phenotype (physical units),
//! - `manifest.csv`: `id,split,label,file,offset`,
//! - `norm.csv`: per-phenotype mean/std over the train split.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;

use crate::numerics::Rng;
use crate::phantom::{self, Cine, EF, EF_THRESHOLD, P, PHENOTYPE_NAMES};
use crate::{Error, Result};

pub const CINE_MAGIC: &[u8; 4] = b"CPGC";
pub const CINE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub const CINES_FILE: &str = "cines.cpgc";
pub const PHENOTYPES_FILE: &str = "phenotypes.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const NORM_FILE: &str = "norm.csv";

/// Size in bytes of one container record for `c`.
pub fn cine_record_len(c: &Cine) -> u64 {
    (4 + 4 + 16 + 1 + 4 * c.data.len()) as u64
}

pub fn write_cine<W: Write>(mut w: W, c: &Cine) -> Result<()> {
    w.write_all(CINE_MAGIC)?;
    w.write_all(&CINE_VERSION.to_le_bytes())?;
    for d in c.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    let mut buf = Vec::with_capacity(4 * c.data.len());
    for v in &c.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_cine<R: Read>(mut r: R) -> Result<Cine> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CINE_MAGIC {
        return Err(Error::Format(format!("bad cine magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CINE_VERSION {
        return Err(Error::Version { what: "cine container", found: version, expected: CINE_VERSION });
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    if dims[0] != 1 {
        return Err(Error::Format(format!("expected 1 channel, found {}", dims[0])));
    }
    let mut dtype = [0u8];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", dtype[0])));
    }
    let n = dims[1] * dims[2] * dims[3];
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Cine::new(dims[1], dims[2], dims[3], data)
}

/// Writes all cines back to back; returns each record's byte offset.
pub fn write_cines(path: &Path, cines: &[Cine]) -> Result<Vec<u64>> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut offsets = Vec::with_capacity(cines.len());
    let mut off = 0;
    for c in cines {
        offsets.push(off);
        write_cine(&mut w, c)?;
        off += cine_record_len(c);
    }
    w.flush()?;
    Ok(offsets)
}

/// Reads every record of a container file.
pub fn read_cines(path: &Path) -> Result<Vec<Cine>> {
    let len = fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut off = 0;
    while off < len {
        let c = read_cine(&mut r)?;
        off += cine_record_len(&c);
        out.push(c);
    }
    Ok(out)
}

pub fn read_cine_at(path: &Path, offset: u64) -> Result<Cine> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    read_cine(BufReader::new(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    pub split: Split,
    /// 1 when EF_area is below the reduced-EF threshold.
    pub label: u8,
    pub file: String,
    pub offset: u64,
}

/// Per-dimension z-scoring. Population std, so normalized train data has
/// unit variance under the same definition.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let Some(first) = rows.first() else {
            return Err(Error::invalid("cannot fit normalization on zero rows"));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for r in &rows {
            for j in 0..d {
                std[j] += (r[j] - mean[j]).powi(2);
            }
        }
        for (j, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                return Err(Error::invalid(format!("dimension {j} has zero variance")));
            }
        }
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn write_csv(&self, path: &Path, names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "mean", "std"])?;
        for (j, name) in names.iter().enumerate() {
            w.write_record([name.to_string(), self.mean[j].to_string(), self.std[j].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            mean.push(parse_f64(&rec[1])?);
            std.push(parse_f64(&rec[2])?);
        }
        Ok(Normalizer { mean, std })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format(format!("not a number: `{s}`")))
}

pub fn label_of(phenotypes: &[f64]) -> u8 {
    u8::from(phenotypes[EF] < EF_THRESHOLD)
}

/// In-memory dataset; `phenotypes` are in physical units.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cines: Vec<Cine>,
    pub phenotypes: Vec<[f64; P]>,
    pub manifest: Vec<ManifestRow>,
    pub norm: Normalizer,
}

/// Train/val/test sizes for `n` samples: 10% each for val and test, floor.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let v = n / 10;
    (n - 2 * v, v, v)
}

impl Dataset {
    /// Renders and measures `n` phantoms of shape (1, t, h, w).
    pub fn generate(n: usize, seed: u64, t: usize, h: usize, w: usize) -> Result<Self> {
        if n < 10 {
            return Err(Error::invalid(format!("n must be ≥ 10, got {n}")));
        }
        let mut cines = Vec::with_capacity(n);
        let mut phenotypes = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = Rng::stream(seed, &[0, i as u64]);
            let (c, m) = loop {
                let p = phantom::sample_params(&mut rng, h, w)?;
                let c = phantom::render_cine(&p, t, h, w, &mut rng)?;
                if let Some(m) = phantom::measure_phenotypes(&c) {
                    break (c, m);
                }
            };
            cines.push(c);
            phenotypes.push(m);
        }
        let mut order: Vec<usize> = (0..n).collect();
        Rng::stream(seed, &[1]).shuffle(&mut order);
        let (n_train, n_val, _) = split_counts(n);
        let mut split = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        let mut manifest = Vec::with_capacity(n);
        let mut off = 0;
        for i in 0..n {
            manifest.push(ManifestRow {
                id: i,
                split: split[i],
                label: label_of(&phenotypes[i]),
                file: CINES_FILE.to_string(),
                offset: off,
            });
            off += cine_record_len(&cines[i]);
        }
        let norm = Normalizer::fit(
            (0..n).filter(|&i| split[i] == Split::Train).map(|i| &phenotypes[i][..]),
        )?;
        Ok(Dataset { cines, phenotypes, manifest, norm })
    }

    pub fn len(&self) -> usize {
        self.cines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cines.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.iter().filter(|r| r.split == split).map(|r| r.id).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.manifest.iter().map(|r| r.label).collect()
    }

    pub fn normalized(&self, i: usize) -> Vec<f64> {
        self.norm.normalize(&self.phenotypes[i])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_cines(&dir.join(CINES_FILE), &self.cines)?;
        write_phenotypes(&dir.join(PHENOTYPES_FILE), &self.phenotypes)?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
        w.write_record(["id", "split", "label", "file", "offset"])?;
        for r in &self.manifest {
            w.write_record([
                r.id.to_string(),
                r.split.to_string(),
                r.label.to_string(),
                r.file.clone(),
                r.offset.to_string(),
            ])?;
        }
        w.flush()?;
        self.norm.write_csv(&dir.join(NORM_FILE), &PHENOTYPE_NAMES)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut manifest = Vec::new();
        let mut r = csv::Reader::from_path(dir.join(MANIFEST_FILE))?;
        for rec in r.records() {
            let rec = rec?;
            let int = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("bad integer `{s}` in manifest")));
            manifest.push(ManifestRow {
                id: int(&rec[0])? as usize,
                split: rec[1].parse()?,
                label: int(&rec[2])? as u8,
                file: rec[3].to_string(),
                offset: int(&rec[4])?,
            });
        }
        let cines = manifest
            .iter()
            .map(|m| read_cine_at(&dir.join(&m.file), m.offset))
            .collect::<Result<Vec<_>>>()?;
        let phenotypes = read_phenotypes(&dir.join(PHENOTYPES_FILE))?;
        if phenotypes.len() != cines.len() {
            return Err(Error::Format(format!(
                "{} phenotype rows for {} cines",
                phenotypes.len(),
                cines.len()
            )));
        }
        let norm = Normalizer::read_csv(&dir.join(NORM_FILE))?;
        Ok(Dataset { cines, phenotypes, manifest, norm })
    }
}

/// Generates `n` phantoms and writes them under `dir`.
pub fn build_dataset(n: usize, seed: u64, dir: &Path, t: usize, h: usize, w: usize) -> Result<Dataset> {
    let ds = Dataset::generate(n, seed, t, h, w)?;
    ds.save(dir)?;
    Ok(ds)
}

pub fn write_phenotypes(path: &Path, rows: &[[f64; P]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id"];
    header.extend(PHENOTYPE_NAMES);
    w.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_phenotypes(path: &Path) -> Result<Vec<[f64; P]>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() != P + 1 {
        return Err(Error::Format(format!("phenotype CSV has {} columns, expected {}", header.len(), P + 1)));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut row = [0.0; P];
        for (j, v) in row.iter_mut().enumerate() {
            *v = parse_f64(&rec[j + 1])?;
        }
        out.push(row);
    }
    Ok(out)
}

/// Class-balanced subset of `idx`: the majority class is subsampled to the
/// minority count. Order of the result is ascending.
pub fn balanced_subset(idx: &[usize], labels: &[u8], rng: &mut Rng) -> Vec<usize> {
    let pos: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == 0).collect();
    let k = pos.len().min(neg.len());
    let pick = |v: &[usize], rng: &mut Rng| -> Vec<usize> { rng.choose(v.len(), k).into_iter().map(|j| v[j]).collect() };
    let mut out = pick(&pos, rng);
    out.extend(pick(&neg, rng));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_are_80_10_10() {
        assert_eq!(split_counts(100), (80, 10, 10));
        assert_eq!(split_counts(500), (400, 50, 50));
    }

    #[test]
    fn too_small_is_rejected() {
        let err = Dataset::generate(5, 1, 8, 32, 32).unwrap_err().to_string();
        assert!(err.contains("n must be ≥ 10"), "{err}");
    }

    #[test]
    fn cine_record_round_trip() {
        let c = Cine::new(2, 2, 3, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let mut buf = Vec::new();
        write_cine(&mut buf, &c).unwrap();
        assert_eq!(buf.len() as u64, cine_record_len(&c));
        assert_eq!(&buf[..4], b"CPGC");
        assert_eq!(read_cine(&buf[..]).unwrap(), c);
    }

    #[test]
    fn wrong_version_reports_both() {
        let c = Cine::zeros(2, 1, 1);
        let mut buf = Vec::new();
        write_cine(&mut buf, &c).unwrap();
        buf[4] = 9;
        let err = read_cine(&buf[..]).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");
    }

    #[test]
    fn balanced_subset_has_equal_classes() {
        let labels = [1, 0, 0, 0, 1, 0, 0, 1, 0, 0];
        let idx: Vec<usize> = (0..10).collect();
        let s = balanced_subset(&idx, &labels, &mut Rng::new(2));
        assert_eq!(s.len(), 6);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 3);
    }

    #[test]
    fn normalizer_rejects_constant_dimension() {
        let rows = [[1.0, 2.0], [1.0, 3.0]];
        assert!(Normalizer::fit(rows.iter().map(|r| &r[..])).is_err());
    }
}

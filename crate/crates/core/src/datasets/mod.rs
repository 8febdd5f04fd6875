//! MOS-annotated manifests: loaders for the generic CSV, TID-2013 and
//! KADID-10k layouts, reference-grouped splitting, and the synthetic
//! distortion generator.

mod synthetic;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, Family, SyntheticSpec};

/// One annotated image. Higher `mos` means better quality.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mos: f64,
    pub dist_type: Option<String>,
    pub dist_level: Option<u32>,
    pub ref_path: Option<PathBuf>,
}

impl SampleRecord {
    pub fn new(image_path: impl Into<PathBuf>, mos: f64) -> Self {
        Self {
            image_path: image_path.into(),
            mos,
            dist_type: None,
            dist_level: None,
            ref_path: None,
        }
    }

    /// Content identity used to keep all distortions of one source together.
    pub fn group_key(&self) -> &Path {
        self.ref_path.as_deref().unwrap_or(&self.image_path)
    }
}

/// Non-empty ordered list of records.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    source: String,
    mos_min: f64,
    mos_max: f64,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>, source: impl Into<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("empty manifest"));
        }
        if let Some(r) = records.iter().find(|r| !r.mos.is_finite()) {
            return Err(Error::data(format!("non-finite mos for {}", r.image_path.display())));
        }
        let mos_min = records.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
        let mos_max = records.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            records,
            source: source.into(),
            mos_min,
            mos_max,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn mos_min(&self) -> f64 {
        self.mos_min
    }

    pub fn mos_max(&self) -> f64 {
        self.mos_max
    }

    /// Number of distinct reference groups.
    pub fn num_groups(&self) -> usize {
        self.records.iter().map(|r| r.group_key()).collect::<HashSet<_>>().len()
    }

    /// Keeps the first `n` records; used for quick runs.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.records[..n.min(self.len())].to_vec(), self.source.clone())
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        Error::data(format!("{}: missing required column `{name}`", path.display()))
    })
}

fn parse_mos(raw: &str, path: &Path, line: u64) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::data(format!("{}:{line}: unparseable mos `{raw}`", path.display())))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Generic manifest: header `image_path,mos[,dist_type,dist_level,ref_path]`.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest_csv(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv_reader(&text);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let img_col = column(&headers, "image_path", path)?;
    let mos_col = column(&headers, "mos", path)?;
    let opt = |name: &str| headers.iter().position(|h| h == name);
    let (type_col, level_col, ref_col) = (opt("dist_type"), opt("dist_level"), opt("ref_path"));
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = record_line(&row);
        let field = |c: Option<usize>| c.and_then(|c| row.get(c)).filter(|s| !s.is_empty());
        let image = field(Some(img_col))
            .ok_or_else(|| Error::data(format!("{}:{line}: empty image_path", path.display())))?;
        let mut rec = SampleRecord::new(resolve(base, image), parse_mos(&row[mos_col], path, line)?);
        rec.dist_type = field(type_col).map(str::to_owned);
        rec.dist_level = match field(level_col) {
            Some(s) => Some(s.parse().map_err(|_| {
                Error::data(format!("{}:{line}: bad dist_level `{s}`", path.display()))
            })?),
            None => None,
        };
        rec.ref_path = field(ref_col).map(|s| resolve(base, s));
        records.push(rec);
    }
    Manifest::new(records, format!("csv:{}", path.display()))
}

fn relative_to<'a>(p: &'a Path, base: &Path) -> &'a Path {
    p.strip_prefix(base).unwrap_or(p)
}

/// Writes the generic manifest layout; paths under the CSV's directory are
/// stored relative to it.
pub fn write_manifest_csv(manifest: &Manifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    wtr.write_record(["image_path", "mos", "dist_type", "dist_level", "ref_path"])
        .map_err(to_err)?;
    for r in &manifest.records {
        wtr.write_record([
            relative_to(&r.image_path, base).to_string_lossy().as_ref(),
            &r.mos.to_string(),
            r.dist_type.as_deref().unwrap_or(""),
            &r.dist_level.map(|l| l.to_string()).unwrap_or_default(),
            &r
                .ref_path
                .as_deref()
                .map(|p| relative_to(p, base).to_string_lossy().into_owned())
                .unwrap_or_default(),
        ])
        .map_err(to_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits names like `i01_01_1.bmp` / `I01_01_01.png` into (reference, type, level).
fn parse_distorted_name(name: &str) -> Option<(String, String, u32)> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    let mut parts = stem.split('_');
    let (r, t, l) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() {
        return None;
    }
    Some((r.to_ascii_uppercase(), t.to_owned(), l.parse().ok()?))
}

/// TID-2013 `mos_with_names.txt`: one `<mos> <filename>` pair per line.
pub fn load_tid2013(mos_file: &Path, image_dir: &Path) -> Result<Manifest> {
    let text = read_text(mos_file)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(mos), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::data(format!(
                "{}:{line_no}: expected `<mos> <filename>`, got `{line}`",
                mos_file.display()
            )));
        };
        let mut rec = SampleRecord::new(image_dir.join(name), parse_mos(mos, mos_file, line_no)?);
        if let Some((r, t, l)) = parse_distorted_name(name) {
            let ext = Path::new(name).extension().and_then(|e| e.to_str()).unwrap_or("bmp");
            rec.ref_path = Some(PathBuf::from(format!("{r}.{}", ext.to_ascii_uppercase())));
            rec.dist_type = Some(t);
            rec.dist_level = Some(l);
        }
        records.push(rec);
    }
    Manifest::new(records, format!("tid2013:{}", mos_file.display()))
}

/// KADID-10k `dmos.csv` with header `dist_img,ref_img,dmos,var`.
pub fn load_kadid(dmos_csv: &Path, image_dir: &Path) -> Result<Manifest> {
    let text = read_text(dmos_csv)?;
    let mut rdr = csv_reader(&text);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", dmos_csv.display())))?
        .clone();
    let dist_col = column(&headers, "dist_img", dmos_csv)?;
    let ref_col = column(&headers, "ref_img", dmos_csv)?;
    let dmos_col = column(&headers, "dmos", dmos_csv)?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", dmos_csv.display())))?;
        let line = record_line(&row);
        let dist = &row[dist_col];
        let mut rec = SampleRecord::new(image_dir.join(dist), parse_mos(&row[dmos_col], dmos_csv, line)?);
        rec.ref_path = Some(image_dir.join(&row[ref_col]));
        if let Some((_, t, l)) = parse_distorted_name(dist) {
            rec.dist_type = Some(t);
            rec.dist_level = Some(l);
        }
        records.push(rec);
    }
    Manifest::new(records, format!("kadid:{}", dmos_csv.display()))
}

/// Reference-grouped, seeded split. The train side receives
/// `floor(train_fraction · groups)` groups, clamped so both sides are non-empty.
pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::usage(format!("train_fraction must be in (0,1), got {train_fraction}")));
    }
    let mut groups: Vec<&Path> = Vec::new();
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if seen.insert(r.group_key()) {
            groups.push(r.group_key());
        }
    }
    if groups.len() < 2 {
        return Err(Error::data(format!(
            "fewer than 2 reference groups ({}) to split",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let n_train = ((train_fraction * groups.len() as f64).floor() as usize).clamp(1, groups.len() - 1);
    let side: HashMap<&Path, bool> = groups.iter().enumerate().map(|(i, g)| (*g, i < n_train)).collect();
    let (train, test): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .cloned()
        .partition(|r| side[r.group_key()]);
    Ok((
        Manifest::new(train, format!("{}#train", manifest.source))?,
        Manifest::new(test, format!("{}#test", manifest.source))?,
    ))
}

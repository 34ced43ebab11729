//! Datasets with coarse and (optional) fine labels, the two synthetic
//! generators, crop/mirror augmentation and the `CFDS1` binary format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;

pub const DATASET_MAGIC: &[u8; 6] = b"CFDS1\0";

/// Background value of blank patch images.
pub const BACKGROUND: f64 = 0.5;

/// Attempts at drawing non-overlapping patch positions before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 1000;

/// Element type used when a dataset is serialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Height and width of an `H×W×3` image stored channel-last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Matrix,
    pub coarse_labels: Vec<usize>,
    pub fine_labels: Option<Vec<usize>>,
    pub num_coarse: usize,
    /// 0 when fine labels are absent.
    pub num_fine: usize,
    pub dtype: DType,
    /// Set for image data; not part of the serialized format.
    pub image: Option<ImageShape>,
}

impl Dataset {
    /// Builds a dataset after checking label ranges and that every fine
    /// class lives inside a single coarse class.
    pub fn new(
        examples: Matrix,
        coarse_labels: Vec<usize>,
        fine_labels: Option<Vec<usize>>,
        num_coarse: usize,
        num_fine: usize,
    ) -> Result<Self> {
        let d = Dataset {
            examples,
            coarse_labels,
            fine_labels,
            num_coarse,
            num_fine,
            dtype: DType::F64,
            image: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_image(mut self, shape: ImageShape) -> Result<Self> {
        if shape.len() != self.dim() {
            return Err(invalid(format!(
                "image {}x{}x3 does not match dim {}",
                shape.height,
                shape.width,
                self.dim()
            )));
        }
        self.image = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.examples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.coarse_labels.len() != n {
            return Err(invalid(format!(
                "{} coarse labels for {n} examples",
                self.coarse_labels.len()
            )));
        }
        if let Some(i) = self.coarse_labels.iter().position(|&c| c >= self.num_coarse) {
            return Err(invalid(format!(
                "coarse label {} of example {i} >= C = {}",
                self.coarse_labels[i], self.num_coarse
            )));
        }
        if !self.examples.is_finite() {
            return Err(invalid("dataset contains non-finite values"));
        }
        match &self.fine_labels {
            None if self.num_fine != 0 => {
                Err(invalid("F > 0 but no fine labels were supplied"))
            }
            None => Ok(()),
            Some(fine) => {
                if fine.len() != n {
                    return Err(invalid(format!("{} fine labels for {n} examples", fine.len())));
                }
                if let Some(i) = fine.iter().position(|&f| f >= self.num_fine) {
                    return Err(invalid(format!(
                        "fine label {} of example {i} >= F = {}",
                        fine[i], self.num_fine
                    )));
                }
                self.fine_to_coarse().map(|_| ())
            }
        }
    }

    /// Map from fine class to its coarse class (`None` for unused fine
    /// classes). Errors if a fine class spans two coarse classes.
    pub fn fine_to_coarse(&self) -> Result<Vec<Option<usize>>> {
        let fine = self
            .fine_labels
            .as_ref()
            .ok_or_else(|| invalid("dataset has no fine labels"))?;
        let mut parent = vec![None; self.num_fine];
        for (i, (&f, &c)) in fine.iter().zip(&self.coarse_labels).enumerate() {
            match parent[f] {
                None => parent[f] = Some(c),
                Some(p) if p != c => {
                    return Err(invalid(format!(
                        "fine class {f} spans coarse classes {p} and {c} (example {i})"
                    )))
                }
                _ => {}
            }
        }
        Ok(parent)
    }

    /// Member example indices of each coarse class, ascending.
    pub fn coarse_members(&self) -> Vec<Vec<usize>> {
        group_by_label(&self.coarse_labels, self.num_coarse)
    }

    /// Guesses a square image shape from the dimension (`dim = 3·s²`,
    /// `s ≥ 4`) when all values lie in `[0, 1]`.
    pub fn infer_image_shape(&self) -> Option<ImageShape> {
        let dim = self.dim();
        if dim % 3 != 0 {
            return None;
        }
        let side = ((dim / 3) as f64).sqrt().round() as usize;
        if side < 4 || side * side * 3 != dim {
            return None;
        }
        let in_unit = self
            .examples
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        in_unit.then_some(ImageShape {
            height: side,
            width: side,
        })
    }
}

pub fn group_by_label(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub n: usize,
    pub n_big: usize,
    pub n_small: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub big_size: usize,
    pub small_size: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            n: 512,
            n_big: 32,
            n_small: 128,
            img_h: 32,
            img_w: 32,
            big_size: 12,
            small_size: 4,
            seed: 0,
        }
    }
}

fn overlaps(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    let (ay, ax, asz) = a;
    let (by, bx, bsz) = b;
    ay < by + bsz && by < ay + asz && ax < bx + bsz && bx < ax + asz
}

fn paint(img: &mut [f64], width: usize, at: (usize, usize), size: usize, color: &[f64; 3]) {
    let (y0, x0) = at;
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let p = (y * width + x) * 3;
            img[p..p + 3].copy_from_slice(color);
        }
    }
}

/// Images on a mid-gray background with one big and one small solid-color
/// patch. The fine label is the small patch, drawn uniformly; small patch
/// `s` belongs to big patch `s mod n_big`, which is the coarse label.
pub fn gen_patch_dataset(cfg: &PatchConfig) -> Result<Dataset> {
    if cfg.n_big == 0 || cfg.n_small == 0 {
        return Err(invalid("n_big and n_small must be at least 1"));
    }
    if cfg.big_size == 0 || cfg.small_size == 0 {
        return Err(invalid("patch sizes must be at least 1"));
    }
    let fits = |s: usize| s <= cfg.img_h && s <= cfg.img_w;
    if !fits(cfg.big_size) || !fits(cfg.small_size) {
        return Err(invalid(format!(
            "patches {}/{} do not fit a {}x{} image",
            cfg.big_size, cfg.small_size, cfg.img_h, cfg.img_w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
    };
    let big_pool: Vec<[f64; 3]> = (0..cfg.n_big).map(|_| color(&mut rng)).collect();
    let small_pool: Vec<[f64; 3]> = (0..cfg.n_small).map(|_| color(&mut rng)).collect();

    let shape = ImageShape {
        height: cfg.img_h,
        width: cfg.img_w,
    };
    let dim = shape.len();
    let mut data = Vec::with_capacity(cfg.n * dim);
    let mut coarse = Vec::with_capacity(cfg.n);
    let mut fine = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let small = rng.random_range(0..cfg.n_small);
        let big = small % cfg.n_big;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = (
                rng.random_range(0..=cfg.img_h - cfg.big_size),
                rng.random_range(0..=cfg.img_w - cfg.big_size),
                cfg.big_size,
            );
            let s = (
                rng.random_range(0..=cfg.img_h - cfg.small_size),
                rng.random_range(0..=cfg.img_w - cfg.small_size),
                cfg.small_size,
            );
            if !overlaps(b, s) {
                placed = Some((b, s));
                break;
            }
        }
        let (b, s) = placed.ok_or(Error::Placement {
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        let mut img = vec![BACKGROUND; dim];
        paint(&mut img, cfg.img_w, (b.0, b.1), b.2, &big_pool[big]);
        paint(&mut img, cfg.img_w, (s.0, s.1), s.2, &small_pool[small]);
        data.extend_from_slice(&img);
        coarse.push(big);
        fine.push(small);
    }
    let examples = Matrix::from_vec(cfg.n, dim, data)?;
    Dataset::new(examples, coarse, Some(fine), cfg.n_big, cfg.n_small)?.with_image(shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub num_coarse: usize,
    pub fine_per_coarse: usize,
    pub per_fine: usize,
    pub dim: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            num_coarse: 4,
            fine_per_coarse: 5,
            per_fine: 10,
            dim: 16,
            coarse_spread: 4.0,
            fine_spread: 1.0,
            noise: 0.2,
            seed: 0,
        }
    }
}

/// Hierarchical Gaussian blobs: coarse centers, fine centers around them,
/// and exactly `per_fine` examples around each fine center. Examples are
/// ordered by coarse class, then fine class.
pub fn gen_blob_dataset(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.num_coarse == 0 || cfg.fine_per_coarse == 0 || cfg.per_fine == 0 || cfg.dim == 0 {
        return Err(invalid("blob counts must all be at least 1"));
    }
    if !(cfg.coarse_spread > 0.0) || !(cfg.fine_spread > 0.0) || !(cfg.noise >= 0.0) {
        return Err(invalid("spreads must be positive and noise non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |rng: &mut ChaCha8Rng, center: &[f64], sd: f64| -> Vec<f64> {
        center
            .iter()
            .map(|c| c + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let origin = vec![0.0; cfg.dim];
    let num_fine = cfg.num_coarse * cfg.fine_per_coarse;
    let n = num_fine * cfg.per_fine;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut coarse = Vec::with_capacity(n);
    let mut fine = Vec::with_capacity(n);
    for k in 0..cfg.num_coarse {
        let cc = gauss(&mut rng, &origin, cfg.coarse_spread);
        for f in 0..cfg.fine_per_coarse {
            let fc = gauss(&mut rng, &cc, cfg.fine_spread);
            for _ in 0..cfg.per_fine {
                data.extend(gauss(&mut rng, &fc, cfg.noise));
                coarse.push(k);
                fine.push(k * cfg.fine_per_coarse + f);
            }
        }
    }
    let examples = Matrix::from_vec(n, cfg.dim, data)?;
    Dataset::new(examples, coarse, Some(fine), cfg.num_coarse, num_fine)
}

/// Mirror (if `mirror`) then take the `H×W` window at offset `(dy, dx)` of
/// the image zero-padded by `pad` on every side.
pub fn augment_with(
    example: &[f64],
    shape: ImageShape,
    pad: usize,
    mirror: bool,
    dy: usize,
    dx: usize,
) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    debug_assert_eq!(example.len(), shape.len());
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    let mut out = vec![0.0; example.len()];
    for y in 0..h {
        let sy = (y + dy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + dx) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let sx = if mirror { w - 1 - sx as usize } else { sx as usize };
            let src = (sy as usize * w + sx) * 3;
            let dst = (y * w + x) * 3;
            out[dst..dst + 3].copy_from_slice(&example[src..src + 3]);
        }
    }
    out
}

/// Random horizontal mirror (p = 0.5) and random crop from the zero-padded
/// image.
pub fn augment(example: &[f64], shape: ImageShape, pad: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mirror = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    augment_with(example, shape, pad, mirror, dy, dx)
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let width = d.dtype.width();
    let n = d.len();
    let mut out = Vec::with_capacity(23 + n * d.dim() * width + n * 8);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [n, d.dim(), d.num_coarse, d.num_fine] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(d.dtype.code());
    for &v in d.examples.as_slice() {
        match d.dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    for &c in &d.coarse_labels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    if let Some(fine) = &d.fine_labels {
        for &f in fine {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < k {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn labels(&mut self, n: usize, bound: usize, what: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.pos as u64;
            let v = self.u32(what)? as usize;
            if v >= bound {
                return Err(Error::Format {
                    offset: at,
                    message: format!("{what} {v} out of range (< {bound})"),
                });
            }
            out.push(v);
        }
        Ok(out)
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected CFDS1".into(),
        });
    }
    let n = r.u32("n")? as usize;
    let dim = r.u32("dim")? as usize;
    let num_coarse = r.u32("C")? as usize;
    let num_fine = r.u32("F")? as usize;
    let dtype_at = r.pos as u64;
    let dtype = match r.u8("dtype")? {
        0 => DType::F32,
        1 => DType::F64,
        other => {
            return Err(Error::Format {
                offset: dtype_at,
                message: format!("unknown dtype {other}"),
            })
        }
    };
    let count = n.checked_mul(dim).ok_or_else(|| Error::Format {
        offset: 6,
        message: "n x dim overflows".into(),
    })?;
    if (bytes.len() - r.pos) / dtype.width() < count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated: expected {count} example values"),
        });
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos as u64;
        let v = match dtype {
            DType::F32 => r.f32("example value")? as f64,
            DType::F64 => r.f64("example value")?,
        };
        if !v.is_finite() {
            return Err(Error::Format {
                offset: at,
                message: "non-finite example value".into(),
            });
        }
        data.push(v);
    }
    let coarse = r.labels(n, num_coarse, "coarse label")?;
    let fine = if num_fine > 0 {
        Some(r.labels(n, num_fine, "fine label")?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let examples = Matrix::from_vec(n, dim, data)?;
    let mut d = Dataset::new(examples, coarse, fine, num_coarse, num_fine).map_err(|e| {
        Error::Format {
            offset: 0,
            message: e.to_string(),
        }
    })?;
    d.dtype = dtype;
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// CSV with header `coarse,fine,x0,…`. An empty `fine` column on every
/// row means fine labels are absent. C and F are inferred as max label + 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.len() < 3 || &headers[0] != "coarse" || &headers[1] != "fine" {
        return Err(Error::Format {
            offset: 0,
            message: "CSV header must be coarse,fine,x0,...".into(),
        });
    }
    let dim = headers.len() - 2;
    let mut data = Vec::new();
    let mut coarse = Vec::new();
    let mut fine: Vec<Option<usize>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let at = rec.position().map_or(0, |p| p.byte());
        let bad = |m: String| Error::Format {
            offset: at,
            message: m,
        };
        coarse.push(
            rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("coarse label: {e}")))?,
        );
        let f = rec[1].trim();
        fine.push(if f.is_empty() {
            None
        } else {
            Some(f.parse::<usize>().map_err(|e| bad(format!("fine label: {e}")))?)
        });
        for field in rec.iter().skip(2) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("value: {e}")))?,
            );
        }
    }
    let n = coarse.len();
    let num_coarse = coarse.iter().max().map_or(0, |m| m + 1);
    let fine = if fine.iter().all(Option::is_none) {
        None
    } else if fine.iter().all(Option::is_some) {
        Some(fine.into_iter().flatten().collect::<Vec<_>>())
    } else {
        return Err(Error::Format {
            offset: 0,
            message: "fine labels must be given on every row or none".into(),
        });
    };
    let num_fine = fine.as_ref().map_or(0, |f| f.iter().max().map_or(0, |m| m + 1));
    let examples = Matrix::from_vec(n, dim, data)?;
    Dataset::new(examples, coarse, fine, num_coarse, num_fine)
}

pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["coarse".to_string(), "fine".to_string()];
    header.extend((0..d.dim()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..d.len() {
        let mut rec = vec![
            d.coarse_labels[i].to_string(),
            d.fine_labels.as_ref().map_or(String::new(), |f| f[i].to_string()),
        ];
        rec.extend(d.examples.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            offset: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Uniform random permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

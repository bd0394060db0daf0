//! Unpaired image folders, preprocessing and the two-stream sampler.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    /// RNG stream id of the domain's augmentation draws.
    fn stream(self) -> u64 {
        match self {
            Domain::X => 1,
            Domain::Y => 2,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::X => "X",
            Domain::Y => "Y",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub image_paths: Vec<PathBuf>,
    pub domain: Domain,
    pub split: Split,
    /// Entries skipped because they were not readable images.
    pub skipped: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.image_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_paths.is_empty()
    }
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lists decodable png/jpg/jpeg files in lexicographic filename order.
/// Everything else is skipped and counted.
pub fn load_domain_folder(path: &Path, domain: Domain, split: Split) -> Result<DomainDataset> {
    let entries = fs::read_dir(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read domain {domain} folder {}: {e}", path.display()),
        ))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut skipped = 0;
    let mut image_paths = Vec::with_capacity(files.len());
    for f in files {
        if has_image_extension(&f) && image::image_dimensions(&f).is_ok() {
            image_paths.push(f);
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!(
            "skipped {skipped} non-image or unreadable file(s) in {}",
            path.display()
        );
    }
    if image_paths.is_empty() {
        return Err(Error::NoImages(path.to_path_buf()));
    }
    Ok(DomainDataset {
        root: path.to_path_buf(),
        image_paths,
        domain,
        split,
        skipped,
    })
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub base_size: u32,
    pub expand_size: u32,
    pub crop_size: u32,
    pub hflip_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            base_size: 512,
            expand_size: 588,
            crop_size: 512,
            hflip_prob: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.crop_size == 0 || self.base_size == 0 {
            return Err("base_size and crop_size must be at least 1".into());
        }
        if self.expand_size < self.crop_size {
            return Err(format!(
                "expand_size ({}) must be at least crop_size ({})",
                self.expand_size, self.crop_size
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(format!("hflip_prob must lie in [0, 1], got {}", self.hflip_prob));
        }
        Ok(())
    }
}

/// Random choices of one preprocessing run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub crop_x: u32,
    pub crop_y: u32,
    pub flip: bool,
}

impl Augment {
    pub fn draw<R: Rng + ?Sized>(cfg: &PreprocessConfig, split: Split, rng: &mut R) -> Self {
        let slack = cfg.expand_size - cfg.crop_size;
        match split {
            Split::Train => {
                let crop_x = rng.random_range(0..=slack);
                let crop_y = rng.random_range(0..=slack);
                let flip = rng.random::<f64>() < cfg.hflip_prob;
                Self {
                    crop_x,
                    crop_y,
                    flip,
                }
            }
            Split::Test => Self::center(cfg),
        }
    }

    /// Deterministic evaluation crop: centered, never flipped.
    pub fn center(cfg: &PreprocessConfig) -> Self {
        let slack = cfg.expand_size - cfg.crop_size;
        Self {
            crop_x: slack / 2,
            crop_y: slack / 2,
            flip: false,
        }
    }
}

/// Maps 8-bit RGB to a 3×H×W tensor in [-1, 1].
pub fn normalize(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Resize to base², resize to expand², crop crop², optional horizontal flip,
/// scale to [-1, 1].
pub fn preprocess_with(img: &RgbImage, cfg: &PreprocessConfig, aug: Augment) -> Result<Tensor> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidInput("image has a zero dimension".into()));
    }
    let base = imageops::resize(img, cfg.base_size, cfg.base_size, FilterType::Triangle);
    let expanded = imageops::resize(&base, cfg.expand_size, cfg.expand_size, FilterType::Triangle);
    let mut crop =
        imageops::crop_imm(&expanded, aug.crop_x, aug.crop_y, cfg.crop_size, cfg.crop_size).to_image();
    if aug.flip {
        imageops::flip_horizontal_in_place(&mut crop);
    }
    Ok(normalize(&crop))
}

pub fn preprocess<R: Rng + ?Sized>(
    img: &RgbImage,
    cfg: &PreprocessConfig,
    split: Split,
    rng: &mut R,
) -> Result<Tensor> {
    preprocess_with(img, cfg, Augment::draw(cfg, split, rng))
}

/// Quantizes a 3×H×W (or 1×3×H×W) tensor to 8-bit RGB, rounding half away
/// from zero. Values outside [-1, 1] are clamped; the count is returned.
pub fn denormalize(t: &Tensor) -> (RgbImage, usize) {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    assert_eq!(t.numel(), 3 * h * w, "denormalize expects one RGB image");
    let mut clamped = 0;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let v = t.data()[c * h * w + y as usize * w + x as usize];
            let q = ((v + 1.0) * 127.5).round();
            if !(0.0..=255.0).contains(&q) || !q.is_finite() {
                clamped += 1;
            }
            *out = if q.is_nan() { 0 } else { q.clamp(0.0, 255.0) as u8 };
        }
        Rgb(px)
    });
    if clamped > 0 {
        log::warn!("clamped {clamped} value(s) outside [-1, 1] while quantizing");
    }
    (img, clamped)
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let (img, _) = denormalize(t);
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
struct Stream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Stream {
    fn new(seed: u64, domain: Domain, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(domain.stream());
        Self {
            rng,
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Everything needed to resume the sampler exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub x_rng: RngState,
    pub x_order: Vec<usize>,
    pub x_cursor: usize,
    pub y_rng: RngState,
    pub y_order: Vec<usize>,
    pub y_cursor: usize,
}

/// One planned draw: which image and how to augment it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub augment: Augment,
}

/// Independent X and Y streams. Each stream walks a fresh permutation of its
/// domain, reshuffling when exhausted; augmentation draws come from the same
/// stream as the index.
#[derive(Clone, Debug)]
pub struct UnpairedSampler {
    x: DomainDataset,
    y: DomainDataset,
    cfg: PreprocessConfig,
    workers: usize,
    sx: Stream,
    sy: Stream,
}

impl UnpairedSampler {
    pub fn new(
        x: DomainDataset,
        y: DomainDataset,
        cfg: PreprocessConfig,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        cfg.validate().map_err(Error::InvalidInput)?;
        let sx = Stream::new(seed, Domain::X, x.len());
        let sy = Stream::new(seed, Domain::Y, y.len());
        Ok(Self {
            x,
            y,
            cfg,
            workers: workers.max(1),
            sx,
            sy,
        })
    }

    /// Draws per epoch: the larger domain is seen once.
    pub fn epoch_len(&self) -> usize {
        self.x.len().max(self.y.len())
    }

    pub fn datasets(&self) -> (&DomainDataset, &DomainDataset) {
        (&self.x, &self.y)
    }

    pub fn next_draws(&mut self) -> (Draw, Draw) {
        let ix = self.sx.next_index();
        let ax = Augment::draw(&self.cfg, self.x.split, &mut self.sx.rng);
        let iy = self.sy.next_index();
        let ay = Augment::draw(&self.cfg, self.y.split, &mut self.sy.rng);
        (
            Draw {
                index: ix,
                augment: ax,
            },
            Draw {
                index: iy,
                augment: ay,
            },
        )
    }

    /// Next unpaired batch, each N×3×crop×crop. Draws are planned in order,
    /// so the result does not depend on `workers`.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<(Tensor, Tensor)> {
        let plans: Vec<(Draw, Draw)> = (0..batch_size).map(|_| self.next_draws()).collect();
        let jobs: Vec<(Domain, Draw)> = plans
            .iter()
            .flat_map(|(a, b)| [(Domain::X, *a), (Domain::Y, *b)])
            .collect();
        let run = |&(domain, d): &(Domain, Draw)| -> Result<Tensor> {
            let ds = match domain {
                Domain::X => &self.x,
                Domain::Y => &self.y,
            };
            preprocess_with(&load_image(&ds.image_paths[d.index])?, &self.cfg, d.augment)
        };
        let images: Vec<Result<Tensor>> = if self.workers > 1 {
            par::map_range(jobs.len(), |i| run(&jobs[i]))
        } else {
            jobs.iter().map(run).collect()
        };
        let images = images.into_iter().collect::<Result<Vec<_>>>()?;
        let xs: Vec<Tensor> = images.iter().step_by(2).cloned().collect();
        let ys: Vec<Tensor> = images.iter().skip(1).step_by(2).cloned().collect();
        Ok((Tensor::stack(&xs), Tensor::stack(&ys)))
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            x_rng: RngState::capture(&self.sx.rng),
            x_order: self.sx.order.clone(),
            x_cursor: self.sx.cursor,
            y_rng: RngState::capture(&self.sy.rng),
            y_order: self.sy.order.clone(),
            y_cursor: self.sy.cursor,
        }
    }

    pub fn restore(&mut self, s: &SamplerState) -> Result<()> {
        if s.x_order.len() != self.x.len() || s.y_order.len() != self.y.len() {
            return Err(Error::InvalidInput(format!(
                "sampler state covers {}+{} images but the datasets hold {}+{}",
                s.x_order.len(),
                s.y_order.len(),
                self.x.len(),
                self.y.len()
            )));
        }
        self.sx = Stream {
            rng: s.x_rng.restore(),
            order: s.x_order.clone(),
            cursor: s.x_cursor,
        };
        self.sy = Stream {
            rng: s.y_rng.restore(),
            order: s.y_order.clone(),
            cursor: s.y_cursor,
        };
        Ok(())
    }
}

/// Deterministic test-split tensors (center crop, no flip) of the first `n` images.
pub fn load_test_images(ds: &DomainDataset, cfg: &PreprocessConfig, n: usize) -> Result<Vec<Tensor>> {
    let aug = Augment::center(cfg);
    ds.image_paths
        .iter()
        .take(n)
        .map(|p| preprocess_with(&load_image(p)?, cfg, aug))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn write_png(dir: &Path, name: &str, w: u32, h: u32, shade: u8) {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([shade, (x * 7 % 256) as u8, (y * 13 % 256) as u8])
        })
        .save(dir.join(name))
        .unwrap();
    }

    fn small() -> PreprocessConfig {
        PreprocessConfig {
            base_size: 16,
            expand_size: 20,
            crop_size: 16,
            hflip_prob: 0.5,
        }
    }

    #[test]
    fn folder_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["c.png", "a.png", "b.png"] {
            write_png(dir.path(), n, 8, 8, 10);
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        fs::write(dir.path().join("broken.png"), "not a png").unwrap();
        let ds = load_domain_folder(dir.path(), Domain::X, Split::Train).unwrap();
        let names: Vec<_> = ds
            .image_paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["a.png", "b.png", "c.png"]);
        assert_eq!(ds.skipped, 2);
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_domain_folder(dir.path(), Domain::Y, Split::Train).unwrap_err();
        assert!(err.to_string().contains("no images found"), "{err}");
    }

    #[test]
    fn default_pipeline_shape() {
        let img = RgbImage::from_fn(1024, 768, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = preprocess(&img, &PreprocessConfig::default(), Split::Train, &mut rng).unwrap();
        assert_eq!(t.shape(), &[3, 512, 512]);
        assert!(t.min() >= -1.0 && t.max() <= 1.0);
    }

    #[test]
    fn white_maps_to_one_and_is_deterministic() {
        let img = RgbImage::from_pixel(30, 20, Rgb([255, 255, 255]));
        let t = preprocess(&img, &small(), Split::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
        let noisy = RgbImage::from_fn(30, 20, |x, y| Rgb([(x * 9) as u8, (y * 11) as u8, 50]));
        let a = preprocess(&noisy, &small(), Split::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = preprocess(&noisy, &small(), Split::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_sized_image_rejected() {
        let img = RgbImage::new(0, 5);
        let aug = Augment {
            crop_x: 0,
            crop_y: 0,
            flip: false,
        };
        assert!(preprocess_with(&img, &small(), aug).is_err());
    }

    #[test]
    fn test_split_is_centered_without_flip() {
        let a = Augment::draw(&PreprocessConfig::default(), Split::Test, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(
            a,
            Augment {
                crop_x: 38,
                crop_y: 38,
                flip: false
            }
        );
    }

    #[test]
    fn denormalize_endpoints_and_round_trip() {
        let t = Tensor::new(vec![3, 1, 2], vec![-1.0, 1.0, -1.0, 1.0, 0.0, 2.0]);
        let (img, clamped) = denormalize(&t);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 128]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 255, 255]);
        assert_eq!(clamped, 1);
        let src = RgbImage::from_fn(9, 5, |x, y| Rgb([(x * 28) as u8, (y * 60) as u8, 200]));
        let (back, _) = denormalize(&normalize(&src));
        assert_eq!(back, src);
    }

    #[test]
    fn epoch_length_and_reproducible_draws() {
        let (dx, dy) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for i in 0..2 {
            write_png(dx.path(), &format!("{i}.png"), 24, 24, i * 50);
        }
        for i in 0..3 {
            write_png(dy.path(), &format!("{i}.png"), 24, 24, i * 70);
        }
        let make = |workers| {
            UnpairedSampler::new(
                load_domain_folder(dx.path(), Domain::X, Split::Train).unwrap(),
                load_domain_folder(dy.path(), Domain::Y, Split::Train).unwrap(),
                small(),
                42,
                workers,
            )
            .unwrap()
        };
        let mut a = make(1);
        let mut b = make(4);
        assert_eq!(a.epoch_len(), 3);
        for _ in 0..5 {
            assert_eq!(a.next_batch(2).unwrap(), b.next_batch(2).unwrap());
        }
        let snapshot = a.state();
        let expected = a.next_batch(1).unwrap();
        let mut c = make(1);
        c.restore(&snapshot).unwrap();
        assert_eq!(c.next_batch(1).unwrap(), expected);
    }

    #[test]
    fn streams_are_independent() {
        let ds = |n: usize, domain| DomainDataset {
            root: PathBuf::new(),
            image_paths: (0..n).map(|i| PathBuf::from(format!("{i}.png"))).collect(),
            domain,
            split: Split::Train,
            skipped: 0,
        };
        let mut s = UnpairedSampler::new(ds(4, Domain::X), ds(5, Domain::Y), small(), 7, 1).unwrap();
        let mut counts = [[0f64; 5]; 4];
        let n = 1000;
        for _ in 0..n {
            let (a, b) = s.next_draws();
            counts[a.index][b.index] += 1.0;
        }
        let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..5).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let mut stat = 0.0;
        for i in 0..4 {
            for j in 0..5 {
                let e = rows[i] * cols[j] / n as f64;
                stat += (counts[i][j] - e).powi(2) / e;
            }
        }
        let p = 1.0 - ChiSquared::new(12.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat}, p = {p}");
    }
}

//! Tiled prediction for images of any size.
//!
//! Windows are laid out on a stride grid whose last row and column are snapped
//! to the image border. Each window is sampled independently (its generator is
//! keyed by the window position), decoded, and the decoded maps are averaged
//! where windows overlap. Images smaller than a window are reflect-padded and
//! the prediction is cropped back.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::data::{read_rgb_png, reflect_pad, write_edge_png, Sample};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_per_item, TransitionSchedule};
use crate::error::{Error, Result};
use crate::maps::{stack_images, EdgeMap, RgbImage};
use crate::random;

pub const TIMING_FILE: &str = "timing.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
    /// Windows sampled together in one forward pass.
    pub batch: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            window: 320,
            stride: 240,
            seed: 0,
            batch: 8,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "tile: need 0 < stride <= window, got stride {} and window {}",
                self.stride, self.window
            )));
        }
        if self.window % 16 != 0 {
            return Err(Error::Config(format!(
                "tile.window = {} must be divisible by 16",
                self.window
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("tile.batch must be positive".into()));
        }
        Ok(())
    }
}

/// Window origins along one axis of length `len`; the last window ends at the
/// border.
pub fn tile_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut p = 0;
    while p + window < len {
        out.push(p);
        p += stride;
    }
    out.push(len - window);
    out.dedup();
    out
}

/// `(y0, x0)` of every window over an `h x w` image (already at least one
/// window in size).
pub fn tile_grid(h: usize, w: usize, tile: &TileConfig) -> Vec<(usize, usize)> {
    let ys = tile_origins(h, tile.window, tile.stride);
    let xs = tile_origins(w, tile.window, tile.stride);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
}

/// Number of windows covering each pixel.
pub fn coverage_counts(h: usize, w: usize, tile: &TileConfig) -> Vec<u32> {
    let mut counts = vec![0u32; h * w];
    let win = tile.window;
    for (y0, x0) in tile_grid(h, w, tile) {
        for y in y0..(y0 + win).min(h) {
            for c in &mut counts[y * w + x0..y * w + (x0 + win).min(w)] {
                *c += 1;
            }
        }
    }
    counts
}

/// Averages window predictions over an `h x w` canvas.
pub fn blend_tiles(
    h: usize,
    w: usize,
    tile: &TileConfig,
    mut predict_window: impl FnMut(usize, usize) -> Result<EdgeMap>,
) -> Result<EdgeMap> {
    let mut sum = vec![0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (y0, x0) in tile_grid(h, w, tile) {
        let p = predict_window(y0, x0)?;
        accumulate(&mut sum, &mut count, w, y0, x0, &p);
    }
    finish(h, w, &sum, &count)
}

fn accumulate(sum: &mut [f64], count: &mut [u32], w: usize, y0: usize, x0: usize, p: &EdgeMap) {
    for y in 0..p.height() {
        for x in 0..p.width() {
            let i = (y0 + y) * w + x0 + x;
            sum[i] += p.get(y, x) as f64;
            count[i] += 1;
        }
    }
}

fn finish(h: usize, w: usize, sum: &[f64], count: &[u32]) -> Result<EdgeMap> {
    if count.contains(&0) {
        return Err(Error::invalid("tile grid left pixels uncovered"));
    }
    EdgeMap::new(
        h,
        w,
        sum.iter()
            .zip(count)
            .map(|(s, &c)| ((s / c as f64) as f32).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Generator stream for the window at `(y0, x0)`.
fn window_stream(y0: usize, x0: usize) -> u64 {
    ((y0 as u64) << 32) | x0 as u64
}

/// Frozen autoencoder + denoiser with a sampling schedule.
pub struct Predictor<'a> {
    pub ae: &'a Autoencoder,
    pub net: &'a Denoiser,
    pub schedule: TransitionSchedule,
    pub tile: TileConfig,
    pub device: Device,
}

impl Predictor<'_> {
    fn check(&self) -> Result<()> {
        self.tile.validate()?;
        self.schedule.validate()?;
        let g = self.net.geometry();
        if g.height * 4 != self.tile.window || g.width * 4 != self.tile.window {
            return Err(Error::Config(format!(
                "tile.window = {} but the denoiser was trained on {}x{} crops",
                self.tile.window,
                g.height * 4,
                g.width * 4
            )));
        }
        Ok(())
    }

    /// Edge maps for the given windows, `(image index, y0, x0)` into `images`.
    fn predict_windows(&self, images: &[&RgbImage], jobs: &[(usize, usize, usize)]) -> Result<Vec<EdgeMap>> {
        let win = self.tile.window;
        let g = self.net.geometry();
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.tile.batch) {
            let crops: Vec<RgbImage> = chunk
                .iter()
                .map(|&(i, y0, x0)| images[i].crop(y0, x0, win, win))
                .collect();
            let refs: Vec<&RgbImage> = crops.iter().collect();
            let image = stack_images(&refs, &self.device)?;
            let cond = self.net.encode_condition(&image)?;
            let mut rngs: Vec<_> = chunk
                .iter()
                .map(|&(_, y0, x0)| random::generator(self.tile.seed, window_stream(y0, x0)))
                .collect();
            let z = sample_per_item(
                self.net,
                &cond,
                &self.schedule,
                &[g.channels, g.height, g.width],
                &mut rngs,
                &self.device,
            )?;
            let decoded = self.ae.decode_batch(&z)?;
            for k in 0..chunk.len() {
                out.push(EdgeMap::from_tensor(&decoded.narrow(0, k, 1)?)?);
            }
        }
        Ok(out)
    }

    /// Predictions for several images; windows of different images share
    /// batches.
    pub fn predict_many(&self, images: &[RgbImage]) -> Result<Vec<EdgeMap>> {
        self.check()?;
        let win = self.tile.window;
        let padded: Vec<(RgbImage, usize, usize)> = images
            .iter()
            .map(|im| pad_to_window(im, win))
            .collect();
        let mut jobs = Vec::new();
        for (i, (im, _, _)) in padded.iter().enumerate() {
            let (h, w) = im.dims();
            for (y0, x0) in tile_grid(h, w, &self.tile) {
                jobs.push((i, y0, x0));
            }
        }
        let refs: Vec<&RgbImage> = padded.iter().map(|p| &p.0).collect();
        let maps = self.predict_windows(&refs, &jobs)?;
        let mut sums: Vec<(Vec<f64>, Vec<u32>)> = padded
            .iter()
            .map(|(im, _, _)| (vec![0.0; im.data().len() / 3], vec![0; im.data().len() / 3]))
            .collect();
        for (&(i, y0, x0), m) in jobs.iter().zip(&maps) {
            let w = padded[i].0.width();
            let (s, c) = &mut sums[i];
            accumulate(s, c, w, y0, x0, m);
        }
        padded
            .iter()
            .zip(&sums)
            .zip(images)
            .map(|(((im, top, left), (s, c)), orig)| {
                let full = finish(im.height(), im.width(), s, c)?;
                Ok(full.crop(*top, *left, orig.height(), orig.width()))
            })
            .collect()
    }

    pub fn predict(&self, image: &RgbImage) -> Result<EdgeMap> {
        Ok(self.predict_many(std::slice::from_ref(image))?.remove(0))
    }
}

/// Reflect-pads `im` to at least `win x win`, returning the padded image and
/// the offset of the original inside it.
fn pad_to_window(im: &RgbImage, win: usize) -> (RgbImage, usize, usize) {
    let (h, w) = im.dims();
    if h >= win && w >= win {
        return (im.clone(), 0, 0);
    }
    let s = Sample {
        image: im.clone(),
        gt: EdgeMap::zeros(h, w),
        id: String::new(),
    };
    let p = reflect_pad(&s, win, win);
    let (th, tw) = p.image.dims();
    (p.image, (th - h) / 2, (tw - w) / 2)
}

/// Outcome of [`predict_batch`].
#[derive(Debug, Default)]
pub struct BatchReport {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

/// PNG files in a directory (sorted), or the path itself if it is a file.
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Predicts every input, writing `{stem}.png` into `output_dir` and a
/// per-image timing table. Failures are logged and reported; the remaining
/// inputs are still processed.
pub fn predict_batch(paths: &[PathBuf], output_dir: &Path, predictor: &Predictor) -> Result<BatchReport> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut report = BatchReport::default();
    let mut timing = String::from("file,height,width,seconds,status\n");
    for path in paths {
        let start = Instant::now();
        let result = read_rgb_png(path).and_then(|im| {
            let pred = predictor.predict(&im)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let out = output_dir.join(format!("{stem}.png"));
            write_edge_png(&out, &pred)?;
            Ok((out, im.dims()))
        });
        let secs = start.elapsed().as_secs_f64();
        let name = path.display();
        match result {
            Ok((out, (h, w))) => {
                log::info!("{name}: {secs:.3}s");
                timing.push_str(&format!("{name},{h},{w},{secs:.4},ok\n"));
                report.written.push(out);
            }
            Err(e) => {
                log::error!("{name}: {e}");
                timing.push_str(&format!("{name},,,{secs:.4},error\n"));
                report.failed.push((path.clone(), e.to_string()));
            }
        }
    }
    let tpath = output_dir.join(TIMING_FILE);
    fs::File::create(&tpath)
        .and_then(|mut f| f.write_all(timing.as_bytes()))
        .map_err(|e| Error::io(&tpath, e))?;
    Ok(report)
}

/// Convenience: single image tensor `(1, 3, H, W)` for a window crop.
pub fn window_tensor(image: &RgbImage, y0: usize, x0: usize, win: usize, device: &Device) -> Result<Tensor> {
    image.crop(y0, x0, win, win).to_tensor(device)
}

//! Synthetic image datasets: Gaussian class clusters in a small latent space,
//! rendered to tiny images through a fixed bank of smooth spatial patterns.
//!
//! Domain variants apply a per-domain rotation or colour shift on top.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Item};
use crate::error::{invalid, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Standard deviation of class centres in latent space.
    pub separation: f64,
    /// Within-class standard deviation in latent space.
    pub noise: f64,
    /// Additive per-pixel noise after rendering.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            n_classes: 10,
            per_class: 100,
            image_size: 16,
            channels: 3,
            latent_dim: 8,
            separation: 1.0,
            noise: 0.5,
            pixel_noise: 0.02,
            seed: 0,
        }
    }
}

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.per_class == 0 || self.image_size == 0 {
            return Err(invalid!("blob spec needs positive classes, per_class and image_size"));
        }
        if self.channels == 0 || self.latent_dim == 0 {
            return Err(invalid!("blob spec needs positive channels and latent_dim"));
        }
        Ok(())
    }
}

struct Renderer {
    size: usize,
    channels: usize,
    /// `latent_dim` patterns, each `size·size·channels`.
    patterns: Vec<Vec<f64>>,
    centres: Vec<Vec<f64>>,
}

impl Renderer {
    fn new(spec: &BlobSpec) -> Self {
        let mut rng = rng_for(spec.seed, "blob-patterns", 0);
        let s = spec.image_size;
        let width = s as f64 / 4.0;
        let patterns = (0..spec.latent_dim)
            .map(|_| {
                let mut p = vec![0.0; s * s * spec.channels];
                for _ in 0..2 {
                    let cy = rng.random::<f64>() * s as f64;
                    let cx = rng.random::<f64>() * s as f64;
                    let w: Vec<f64> = (0..spec.channels)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            let k = (-d2 / (2.0 * width * width)).exp();
                            for (c, wc) in w.iter().enumerate() {
                                p[(y * s + x) * spec.channels + c] += wc * k;
                            }
                        }
                    }
                }
                let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
                p.iter_mut().for_each(|v| *v /= peak);
                p
            })
            .collect();
        let mut crng = rng_for(spec.seed, "blob-centres", 0);
        let centres = (0..spec.n_classes)
            .map(|_| {
                (0..spec.latent_dim)
                    .map(|_| spec.separation * Distribution::<f64>::sample(&StandardNormal, &mut crng))
                    .collect()
            })
            .collect();
        Renderer {
            size: s,
            channels: spec.channels,
            patterns,
            centres,
        }
    }

    fn render<R: Rng>(&self, class: usize, spec: &BlobSpec, rng: &mut R) -> Vec<f32> {
        let z: Vec<f64> = self.centres[class]
            .iter()
            .map(|c| c + spec.noise * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let n = self.size * self.size * self.channels;
        (0..n)
            .map(|i| {
                let a: f64 = self.patterns.iter().zip(&z).map(|(p, zj)| p[i] * zj).sum();
                let e: f64 = StandardNormal.sample(rng);
                let v = 1.0 / (1.0 + (-2.0 * a).exp()) + spec.pixel_noise * e;
                v.clamp(0.0, 1.0) as f32
            })
            .collect()
    }
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("class_{k}")).collect()
}

/// Class-clustered images, `per_class` of each class, no domain ids.
pub fn split_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let r = Renderer::new(spec);
    let mut rng = rng_for(spec.seed, "blob-samples", 0);
    let mut items = Vec::with_capacity(spec.n_classes * spec.per_class);
    for class in 0..spec.n_classes {
        for _ in 0..spec.per_class {
            let data = r.render(class, spec, &mut rng);
            items.push(Item {
                id: items.len(),
                image: Image::new(spec.image_size, spec.image_size, spec.channels, data)?,
                label: class,
                domain: None,
            });
        }
    }
    Dataset::new(items, class_names(spec.n_classes))
}

/// Bilinear rotation about the image centre with edge clamping.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (h, w, ch) = img.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).clamp(0.0, h as f64 - 1.0);
            let sx = (sin * dy + cos * dx + cx).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for c in 0..ch {
                let v = img.at(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
                    + img.at(y0, x1, c) * (1.0 - fy) * fx
                    + img.at(y1, x0, c) * fy * (1.0 - fx)
                    + img.at(y1, x1, c) * fy * fx;
                out[(y * w + x) * ch + c] = v;
            }
        }
    }
    Image {
        height: h,
        width: w,
        channels: ch,
        data: out,
    }
}

/// One domain per angle; every domain holds fresh draws of every class.
pub fn rotated_blobs(spec: &BlobSpec, angles: &[f64]) -> Result<Dataset> {
    domain_variants(spec, angles.len(), |img, d| rotate(img, angles[d]))
}

/// One domain per per-channel offset vector.
pub fn color_shifted_blobs(spec: &BlobSpec, shifts: &[Vec<f32>]) -> Result<Dataset> {
    if shifts.iter().any(|s| s.len() != spec.channels) {
        return Err(invalid!("every colour shift needs {} channels", spec.channels));
    }
    domain_variants(spec, shifts.len(), |img, d| {
        let mut out = img.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = (*v + shifts[d][i % spec.channels]).clamp(0.0, 1.0);
        }
        out
    })
}

fn domain_variants(
    spec: &BlobSpec,
    n_domains: usize,
    transform: impl Fn(&Image, usize) -> Image,
) -> Result<Dataset> {
    spec.validate()?;
    if n_domains == 0 {
        return Err(invalid!("need at least one domain"));
    }
    let r = Renderer::new(spec);
    let mut items = Vec::with_capacity(n_domains * spec.n_classes * spec.per_class);
    for d in 0..n_domains {
        let mut rng = rng_for(spec.seed, "blob-domain", d as u64);
        for class in 0..spec.n_classes {
            for _ in 0..spec.per_class {
                let base = Image::new(
                    spec.image_size,
                    spec.image_size,
                    spec.channels,
                    r.render(class, spec, &mut rng),
                )?;
                items.push(Item {
                    id: items.len(),
                    image: transform(&base, d),
                    label: class,
                    domain: Some(d),
                });
            }
        }
    }
    Dataset::new(items, class_names(spec.n_classes))
}

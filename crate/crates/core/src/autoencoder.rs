//! Image containers, patch tokenization and the transformer encoder/decoder.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use lqae_nn::layers::Linear;
use lqae_nn::transformer::{StackCache, StackConfig, TransformerStack};
use lqae_nn::{Float, GradStore, Mat, Param, ParamBuilder};
use rand::Rng;

use crate::error::{LqaeError, Result};

/// One image, row-major `height x width x channels`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Square preprocessed image, `side x side x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn constant(side: usize, channels: usize, value: f32) -> Self {
        Image { side, channels, data: vec![value; side * side * channels] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.side + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn to_raw(&self) -> RawImage {
        RawImage { width: self.side, height: self.side, channels: self.channels, data: self.data.clone() }
    }
}

/// `B x S x S x C` pixels with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub batch: usize,
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn from_images(images: &[&Image], labels: Option<Vec<usize>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| LqaeError::InvalidArgument("empty image batch".into()))?;
        let (side, channels) = (first.side, first.channels);
        let mut pixels = Vec::with_capacity(images.len() * side * side * channels);
        for img in images {
            if img.side != side || img.channels != channels {
                return Err(LqaeError::Shape(format!(
                    "batch mixes {}x{}x{} and {}x{}x{} images",
                    side, side, channels, img.side, img.side, img.channels
                )));
            }
            pixels.extend_from_slice(&img.data);
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(LqaeError::Shape("label count differs from image count".into()));
            }
        }
        Ok(ImageBatch { batch: images.len(), side, channels, pixels, labels })
    }

    pub fn image_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn image(&self, i: usize) -> Image {
        let n = self.image_len();
        Image { side: self.side, channels: self.channels, data: self.pixels[i * n..(i + 1) * n].to_vec() }
    }

    pub fn clamped(&self) -> ImageBatch {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        out
    }
}

/// Resizes any image to `side x side` with bilinear (triangle) filtering and
/// clamps values into `[0, 1]`. Square inputs of the target size pass through
/// unchanged apart from clamping.
pub fn preprocess(raw: &RawImage, side: usize) -> Result<Image> {
    if raw.width == 0 || raw.height == 0 || side == 0 {
        return Err(LqaeError::InvalidArgument("image sides must be at least one pixel".into()));
    }
    if raw.data.len() != raw.width * raw.height * raw.channels {
        return Err(LqaeError::Shape("raw image buffer does not match its dimensions".into()));
    }
    let mut data = if raw.width == side && raw.height == side {
        raw.data.clone()
    } else {
        let mut out = vec![0.0f32; side * side * raw.channels];
        for c in 0..raw.channels {
            let plane: Vec<f32> = raw.data.iter().skip(c).step_by(raw.channels).copied().collect();
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(raw.width as u32, raw.height as u32, plane).expect("plane size checked");
            let resized = imageops::resize(&buf, side as u32, side as u32, FilterType::Triangle);
            for (i, v) in resized.into_raw().into_iter().enumerate() {
                out[i * raw.channels + c] = v;
            }
        }
        out
    };
    data.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    Ok(Image { side, channels: raw.channels, data })
}

/// Splits each image into non-overlapping `patch x patch` tiles in row-major
/// tile order; each row of the result is one flattened `(py, px, c)` tile.
pub fn patchify(images: &ImageBatch, patch: usize) -> Result<Mat<f32>> {
    let (s, c) = (images.side, images.channels);
    if patch == 0 || s % patch != 0 {
        return Err(LqaeError::Shape(format!("image side {s} is not divisible by patch size {patch}")));
    }
    let g = s / patch;
    let pd = patch * patch * c;
    let mut out = Mat::zeros(images.batch * g * g, pd);
    for b in 0..images.batch {
        let img = &images.pixels[b * s * s * c..(b + 1) * s * s * c];
        for gy in 0..g {
            for gx in 0..g {
                let row = out.row_mut(b * g * g + gy * g + gx);
                for py in 0..patch {
                    let src = ((gy * patch + py) * s + gx * patch) * c;
                    row[py * patch * c..(py + 1) * patch * c].copy_from_slice(&img[src..src + patch * c]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(
    tokens: &Mat<T>,
    batch: usize,
    side: usize,
    channels: usize,
    patch: usize,
) -> Result<ImageBatch> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(LqaeError::Shape(format!("image side {side} is not divisible by patch size {patch}")));
    }
    let g = side / patch;
    if tokens.rows != batch * g * g || tokens.cols != patch * patch * channels {
        return Err(LqaeError::Shape(format!(
            "{}x{} tokens cannot form {batch} images of side {side}",
            tokens.rows, tokens.cols
        )));
    }
    let (s, c) = (side, channels);
    let mut pixels = vec![0.0f32; batch * s * s * c];
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                let row = tokens.row(b * g * g + gy * g + gx);
                for py in 0..patch {
                    let dst = b * s * s * c + ((gy * patch + py) * s + gx * patch) * c;
                    for (o, v) in
                        pixels[dst..dst + patch * c].iter_mut().zip(&row[py * patch * c..(py + 1) * patch * c])
                    {
                        *o = v.as_f32();
                    }
                }
            }
        }
    }
    Ok(ImageBatch { batch, side, channels, pixels, labels: None })
}

/// Shapes of the image encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    /// Latent (codebook) dimension.
    pub code_dim: usize,
    pub enc_width: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
}

impl AutoencoderConfig {
    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Tokens per image, `(side / patch)^2`.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn encoder_stack(&self) -> StackConfig {
        StackConfig {
            width: self.enc_width,
            depth: self.enc_depth,
            heads: self.enc_heads,
            mlp_ratio: self.mlp_ratio,
            seq: self.seq_len(),
        }
    }

    pub fn decoder_stack(&self) -> StackConfig {
        StackConfig {
            width: self.dec_width,
            depth: self.dec_depth,
            heads: self.dec_heads,
            mlp_ratio: self.mlp_ratio,
            seq: self.seq_len(),
        }
    }

    pub fn encoder_param_count(&self) -> usize {
        Linear::<f32>::param_count(self.patch_dim(), self.enc_width)
            + self.encoder_stack().param_count()
            + Linear::<f32>::param_count(self.enc_width, self.code_dim)
    }

    pub fn decoder_param_count(&self) -> usize {
        Linear::<f32>::param_count(self.code_dim, self.dec_width)
            + self.decoder_stack().param_count()
            + Linear::<f32>::param_count(self.dec_width, self.patch_dim())
    }
}

fn check_finite<T: Float>(m: &Mat<T>, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(LqaeError::NumericFailure(layer.to_string()))
    }
}

/// Patch embedding, transformer stack, projection to the codebook dimension.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    pub stack: TransformerStack<T>,
    pub out_proj: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    patches: Mat<T>,
    stack: StackCache<T>,
    stack_out: Mat<T>,
}

impl<T: Float> Encoder<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, cfg: &AutoencoderConfig) -> Self {
        pb.push("encoder");
        let patch_embed = Linear::new(pb, "patch_embed", cfg.patch_dim(), cfg.enc_width);
        let stack = TransformerStack::new(pb, "stack", cfg.encoder_stack());
        let out_proj = Linear::new(pb, "out_proj", cfg.enc_width, cfg.code_dim);
        pb.pop();
        Encoder { patch_embed, stack, out_proj }
    }

    /// Maps `(B*N) x patch_dim` patches to the latent grid `h`, `(B*N) x D`.
    pub fn forward(&self, patches: &Mat<T>, batch: usize) -> Result<(Mat<T>, EncoderCache<T>)> {
        let embedded = self.patch_embed.forward(patches);
        check_finite(&embedded, "encoder.patch_embed")?;
        let (stack_out, stack) = self.stack.forward(&embedded, batch);
        check_finite(&stack_out, "encoder.stack")?;
        let h = self.out_proj.forward(&stack_out);
        check_finite(&h, "encoder.out_proj")?;
        Ok((h, EncoderCache { patches: patches.clone(), stack, stack_out }))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dh: &Mat<T>, grads: &mut GradStore<T>) {
        let d = self.out_proj.backward(&cache.stack_out, dh, Some(grads));
        let d = self.stack.backward(&cache.stack, &d, Some(grads));
        self.patch_embed.backward(&cache.patches, &d, Some(grads));
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.patch_embed.visit(f);
        self.stack.visit(f);
        self.out_proj.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.visit_mut(f);
        self.stack.visit_mut(f);
        self.out_proj.visit_mut(f);
    }
}

/// Projection from the codebook dimension, transformer stack, linear patch head.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub in_proj: Linear<T>,
    pub stack: TransformerStack<T>,
    pub head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    input: Mat<T>,
    stack: StackCache<T>,
    stack_out: Mat<T>,
}

impl<T: Float> Decoder<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, cfg: &AutoencoderConfig) -> Self {
        pb.push("decoder");
        let in_proj = Linear::new(pb, "in_proj", cfg.code_dim, cfg.dec_width);
        let stack = TransformerStack::new(pb, "stack", cfg.decoder_stack());
        let head = Linear::new(pb, "head", cfg.dec_width, cfg.patch_dim());
        pb.pop();
        Decoder { in_proj, stack, head }
    }

    /// Maps `(B*N) x D` embeddings to unclamped patch pixels `(B*N) x patch_dim`.
    pub fn forward(&self, emb: &Mat<T>, batch: usize) -> Result<(Mat<T>, DecoderCache<T>)> {
        let seq = self.stack.cfg.seq;
        if emb.rows != batch * seq || emb.cols != self.in_proj.in_dim {
            return Err(LqaeError::Shape(format!(
                "decoder expects {} x {} embeddings, got {} x {}",
                batch * seq,
                self.in_proj.in_dim,
                emb.rows,
                emb.cols
            )));
        }
        let x = self.in_proj.forward(emb);
        check_finite(&x, "decoder.in_proj")?;
        let (stack_out, stack) = self.stack.forward(&x, batch);
        check_finite(&stack_out, "decoder.stack")?;
        let out = self.head.forward(&stack_out);
        check_finite(&out, "decoder.head")?;
        Ok((out, DecoderCache { input: emb.clone(), stack, stack_out }))
    }

    /// Returns the gradient with respect to the decoder input embeddings.
    pub fn backward(&self, cache: &DecoderCache<T>, dout: &Mat<T>, grads: &mut GradStore<T>) -> Mat<T> {
        let d = self.head.backward(&cache.stack_out, dout, Some(grads));
        let d = self.stack.backward(&cache.stack, &d, Some(grads));
        self.in_proj.backward(&cache.input, &d, Some(grads))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.in_proj.visit(f);
        self.stack.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.in_proj.visit_mut(f);
        self.stack.visit_mut(f);
        self.head.visit_mut(f);
    }
}

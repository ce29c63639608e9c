//! DCGAN-style generator: linear projection, then stride-2 transposed
//! convolutions with normalisation, ending in `tanh`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::layers::{BatchNorm, BnStats, ConvTranspose, Linear};
use crate::model::{bind, digest_tensors, Mode, ParamCursor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub noise_dim: usize,
    /// Channels right after the projection; halved by every upsampling layer.
    pub base_channels: usize,
    /// Spatial side right after the projection.
    pub init_size: usize,
    /// Number of stride-2 transposed convolutions (the last one emits the image).
    pub upsample_layers: usize,
    pub out_shape: [usize; 3],
}

impl GeneratorArch {
    /// Small generator for 8×8 images.
    pub fn desk(channels: usize, side: usize) -> Self {
        Self {
            noise_dim: 32,
            base_channels: 64,
            init_size: side / 4,
            upsample_layers: 2,
            out_shape: [channels, side, side],
        }
    }

    /// DCGAN layout for 32×32 images.
    pub fn dcgan(channels: usize, side: usize) -> Self {
        Self {
            noise_dim: 100,
            base_channels: 512,
            init_size: side / 8,
            upsample_layers: 3,
            out_shape: [channels, side, side],
        }
    }

    fn validate(&self) -> Result<()> {
        let side = self.init_size << self.upsample_layers;
        if self.upsample_layers == 0
            || self.init_size == 0
            || side != self.out_shape[1]
            || side != self.out_shape[2]
        {
            return Err(Error::Config(format!(
                "generator: init size {} with {} upsampling layers cannot produce {:?}",
                self.init_size, self.upsample_layers, self.out_shape
            )));
        }
        if self.base_channels >> (self.upsample_layers - 1) == 0 {
            return Err(Error::Config("generator: too few base channels".into()));
        }
        if self.noise_dim == 0 {
            return Err(Error::Config("generator: noise dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    arch: GeneratorArch,
    /// Number of old classes this generator was recorded against.
    covered_classes: usize,
    project: Linear,
    project_bn: BatchNorm,
    ups: Vec<(ConvTranspose, BatchNorm)>,
    to_image: ConvTranspose,
}

pub struct GeneratorOutput {
    pub images: Var,
    pub batch_stats: Vec<BnStats>,
}

impl Generator {
    pub fn new(arch: GeneratorArch, covered_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = arch.init_size;
        let c0 = arch.base_channels;
        let project = Linear::new(arch.noise_dim, c0 * s * s, &mut rng);
        let mut ups = Vec::new();
        let mut c = c0;
        for _ in 0..arch.upsample_layers - 1 {
            ups.push((
                ConvTranspose::new(c, c / 2, 4, 2, 1, false, &mut rng),
                BatchNorm::new(c / 2),
            ));
            c /= 2;
        }
        let to_image = ConvTranspose::new(c, arch.out_shape[0], 4, 2, 1, true, &mut rng);
        Ok(Self {
            arch,
            covered_classes,
            project,
            project_bn: BatchNorm::new(c0),
            ups,
            to_image,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn noise_dim(&self) -> usize {
        self.arch.noise_dim
    }

    pub fn out_shape(&self) -> [usize; 3] {
        self.arch.out_shape
    }

    pub fn covered_classes(&self) -> usize {
        self.covered_classes
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.project.tensors(&mut out);
        self.project_bn.tensors(&mut out);
        for (ct, bn) in &self.ups {
            ct.tensors(&mut out);
            bn.tensors(&mut out);
        }
        self.to_image.tensors(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let n = self.params().len();
        let mut out = self.state_tensors_mut();
        out.truncate(n);
        out
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.project_bn];
        v.extend(self.ups.iter_mut().map(|(_, bn)| bn));
        v
    }

    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut out = self.params();
        self.project_bn.buffers(&mut out);
        for (_, bn) in &self.ups {
            bn.buffers(&mut out);
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        self.project.tensors_mut(&mut out);
        self.project_bn.tensors_mut(&mut out, &mut buf);
        for (ct, bn) in &mut self.ups {
            ct.tensors_mut(&mut out);
            bn.tensors_mut(&mut out, &mut buf);
        }
        self.to_image.tensors_mut(&mut out);
        out.extend(buf);
        out
    }

    pub fn digest(&self) -> String {
        digest_tensors(self.state_tensors())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(tape, &self.params(), trainable)
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        noise: Var,
        mode: Mode,
    ) -> Result<GeneratorOutput> {
        let shape = tape.shape(noise).to_vec();
        if shape.len() != 2 || shape[1] != self.arch.noise_dim {
            return Err(Error::Dimension(format!(
                "generator expects noise [n, {}], got {:?}",
                self.arch.noise_dim, shape
            )));
        }
        let n = shape[0];
        if n == 0 || (mode == Mode::Train && n < 2) {
            return Err(Error::DegenerateBatch(format!("cannot generate from {n} noise rows in {mode:?} mode")));
        }
        let mut cur = ParamCursor::new(params);
        let mut batch_stats = Vec::new();
        let s = self.arch.init_size;
        let p = self.project.forward(tape, &mut cur, noise);
        let mut h = tape.reshape(p, &[n, self.arch.base_channels, s, s]);
        let (y, st) = self.project_bn.forward(tape, &mut cur, h, mode);
        batch_stats.extend(st);
        h = tape.relu(y);
        for (ct, bn) in &self.ups {
            let u = ct.forward(tape, &mut cur, h);
            let (y, st) = bn.forward(tape, &mut cur, u, mode);
            batch_stats.extend(st);
            h = tape.relu(y);
        }
        let img = self.to_image.forward(tape, &mut cur, h);
        cur.finish();
        let images = tape.tanh(img);
        Ok(GeneratorOutput { images, batch_stats })
    }

    /// Eval-mode images `[n, c, h, w]` in `[-1, 1]`; each image depends only on its noise row.
    pub fn generate(&self, noise: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let z = tape.constant(noise.clone());
        let out = self.forward_on(&mut tape, &params, z, Mode::Eval)?;
        Ok(tape.value(out.images).clone())
    }

    pub fn update_running_stats(&mut self, batch: &[BnStats]) {
        for (bn, st) in self.bns_mut().into_iter().zip(batch) {
            bn.update_running(st);
        }
    }

    /// Replaces running statistics with exact averages of train-mode moments
    /// over the given noise batches.
    pub fn recalibrate(&mut self, noise_batches: &[Tensor]) -> Result<()> {
        let mut sums: Option<Vec<BnStats>> = None;
        for z in noise_batches {
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let zv = tape.constant(z.clone());
            let out = self.forward_on(&mut tape, &params, zv, Mode::Train)?;
            match &mut sums {
                None => sums = Some(out.batch_stats),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&out.batch_stats) {
                        a.mean.iter_mut().zip(&b.mean).for_each(|(x, y)| *x += y);
                        a.var.iter_mut().zip(&b.var).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        if let Some(acc) = sums {
            let k = noise_batches.len() as f64;
            for (bn, st) in self.bns_mut().into_iter().zip(acc) {
                let avg = BnStats {
                    mean: st.mean.iter().map(|v| v / k).collect(),
                    var: st.var.iter().map(|v| v / k).collect(),
                };
                bn.set_stats(&avg);
            }
        }
        Ok(())
    }

    pub fn skeleton(arch: GeneratorArch, covered_classes: usize) -> Result<Self> {
        Self::new(arch, covered_classes, 0)
    }
}

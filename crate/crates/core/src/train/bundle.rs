use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Architecture;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::networks::{
    GeometryDiscriminator, Generator, GradMode, ImageBatch, LossNetwork, ParamStore, PatchDiscriminator,
};

/// Domain A holds sketches (the `x` terms of the objective), domain B photos
/// (the `y` terms).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AToB,
    BToA,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a_to_b" => Ok(Direction::AToB),
            "b_to_a" => Ok(Direction::BToA),
            _ => Err(Error::Config(format!("unknown direction `{s}` (expected a_to_b or b_to_a)"))),
        }
    }
}

/// Kind tags of the per-network containers.
pub(crate) const GENERATOR_KIND: &str = "generator";
pub(crate) const PATCH_KIND: &str = "patch_discriminator";
pub(crate) const GEOMETRY_KIND: &str = "geometry_discriminator";

/// The six trainable networks plus the frozen loss network.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: Architecture,
    /// Sketch to photo.
    pub g_ab: Generator,
    /// Photo to sketch.
    pub g_ba: Generator,
    /// Patch discriminator on sketches.
    pub d_a: PatchDiscriminator,
    /// Patch discriminator on photos.
    pub d_b: PatchDiscriminator,
    pub dg_a: GeometryDiscriminator,
    pub dg_b: GeometryDiscriminator,
    pub phi: LossNetwork,
}

pub(crate) const NETWORK_NAMES: [&str; 6] = ["g_ab", "g_ba", "d_a", "d_b", "dg_a", "dg_b"];

impl ModelBundle {
    /// Freshly initialized networks. Each network draws from its own stream
    /// of `seed`.
    pub fn new(arch: &Architecture, phi: LossNetwork, seed: u64) -> Result<Self> {
        if phi.spec() != &arch.loss_network {
            return Err(Error::Compatibility("loss network spec differs from the architecture".into()));
        }
        let dtype = phi.params().dtype();
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Ok(Self {
            arch: arch.clone(),
            g_ab: Generator::new(&arch.generator, dtype, &mut rng(0))?,
            g_ba: Generator::new(&arch.generator, dtype, &mut rng(1))?,
            d_a: PatchDiscriminator::new(&arch.patch, dtype, &mut rng(2))?,
            d_b: PatchDiscriminator::new(&arch.patch, dtype, &mut rng(3))?,
            dg_a: GeometryDiscriminator::new(&arch.geometry, dtype, &mut rng(4))?,
            dg_b: GeometryDiscriminator::new(&arch.geometry, dtype, &mut rng(5))?,
            phi,
        })
    }

    pub fn dtype(&self) -> DType {
        self.phi.params().dtype()
    }

    /// `(name, parameters)` of the six trainable networks.
    pub fn networks(&self) -> [(&'static str, &ParamStore); 6] {
        [
            ("g_ab", self.g_ab.params()),
            ("g_ba", self.g_ba.params()),
            ("d_a", self.d_a.params()),
            ("d_b", self.d_b.params()),
            ("dg_a", self.dg_a.params()),
            ("dg_b", self.dg_b.params()),
        ]
    }

    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        self.networks().iter().map(|(n, p)| Ok((n.to_string(), p.checksum()?))).collect()
    }

    pub fn generator(&self, direction: Direction) -> &Generator {
        match direction {
            Direction::AToB => &self.g_ab,
            Direction::BToA => &self.g_ba,
        }
    }

    /// Inference through one generator.
    pub fn translate(&self, images: &ImageBatch, direction: Direction) -> Result<ImageBatch> {
        if images.resolution() != self.arch.resolution {
            return Err(Error::Compatibility(format!(
                "checkpoint expects {r}×{r} input, got {s}×{s}",
                r = self.arch.resolution,
                s = images.resolution()
            )));
        }
        let x = images.to_dtype(self.dtype())?;
        Ok(self.generator(direction).forward(&x, GradMode::Frozen)?.detach())
    }

    fn kind_of(name: &str) -> &'static str {
        match name.as_bytes()[0] {
            b'g' => GENERATOR_KIND,
            _ if name.starts_with("dg") => GEOMETRY_KIND,
            _ => PATCH_KIND,
        }
    }

    /// Writes `<name>.safetensors` for every trainable network and
    /// `phi.safetensors` into `dir`.
    pub(crate) fn save_weights(&self, dir: &Path) -> Result<()> {
        let fp = self.arch.fingerprint();
        for (name, params) in self.networks() {
            params
                .to_container(Self::kind_of(name))?
                .with_meta("fingerprint", fp.clone())
                .save(&dir.join(format!("{name}.safetensors")))?;
        }
        self.phi.save(&dir.join("phi.safetensors"))
    }

    /// Loads the six networks named in `only` (all when empty) from `dir`.
    pub(crate) fn load_weights(arch: &Architecture, dir: &Path, only: &[&str]) -> Result<Self> {
        let phi = LossNetwork::load(&dir.join("phi.safetensors"), &arch.loss_network, DType::F32)?;
        let bundle = Self::new(arch, phi, 0)?;
        let fp = arch.fingerprint();
        for (name, params) in bundle.networks() {
            if !only.is_empty() && !only.contains(&name) {
                continue;
            }
            let path = dir.join(format!("{name}.safetensors"));
            let c = Container::load(&path, params.dtype())?.expect_kind(Self::kind_of(name), &path)?;
            if c.meta("fingerprint") != Some(fp.as_str()) {
                return Err(Error::Compatibility(format!(
                    "{} was written for architecture {:?}, expected {fp}",
                    path.display(),
                    c.meta("fingerprint")
                )));
            }
            params.assign(&c.tensors)?;
        }
        Ok(bundle)
    }
}

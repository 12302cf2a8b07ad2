//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `UW360GS` | 7 bytes |
//! | format version | u32 |
//! | Gaussian count | u64 |
//! | SH degree, embedding dim `E`, Fourier bands `L`, attenuation candidates `P`, MLP hidden width | 5 × u32 |
//! | flags (bit 0: optimizer moments, bit 1: smoothing filter, bit 2: appearance disabled, bit 3: medium disabled) | u32 |
//! | active SH degree | u32 |
//! | iteration | u64 |
//! | scene extent, appearance position scale | 2 × f64 |
//!
//! followed by `f32` arrays: `mu, quat, log_scale, raw_opacity, sh`, the pose
//! MLP and the correction MLP (each layer's weights then biases), then the
//! medium parameters `wb, bb, wr, br, raw_Binf, raw_Bres, wa, ba, lambda`.
//! With bit 0 set: the Adam step (u64) and, per parameter group in the same
//! order, first then second moments as `f32`. With bit 1 set: one `f64`
//! filter width per Gaussian.

use std::fs;
use std::path::Path;

use crate::appearance::{AppearanceNet, Mlp, POSE_ENCODING_DIM};
use crate::diff::{GroupId, Model};
use crate::error::{Error, Result};
use crate::medium::{AttenuationParams, BackscatterParams, Medium};
use crate::optim::AdamState;
use crate::scene::{sh, Scene};

pub const MAGIC: &[u8; 7] = b"UW360GS";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_MOMENTS: u32 = 1;
const FLAG_FILTER: u32 = 2;
const FLAG_NO_APPEARANCE: u32 = 4;
const FLAG_NO_MEDIUM: u32 = 8;
const KNOWN_FLAGS: u32 = FLAG_MOMENTS | FLAG_FILTER | FLAG_NO_APPEARANCE | FLAG_NO_MEDIUM;

/// Everything stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub filter: Option<Vec<f64>>,
    pub iteration: u64,
    pub active_sh_degree: usize,
    pub extent: f64,
    pub use_appearance: bool,
    pub use_medium: bool,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u64(&mut buf, m.scene.len() as u64);
    put_u32(&mut buf, m.scene.sh_degree as u32);
    put_u32(&mut buf, m.appearance.embed_dim as u32);
    put_u32(&mut buf, m.appearance.fourier_bands as u32);
    put_u32(&mut buf, m.medium.attenuation.candidates as u32);
    put_u32(&mut buf, m.appearance.pose_mlp.n_hidden as u32);
    let mut flags = 0;
    for (on, bit) in [
        (ck.adam.is_some(), FLAG_MOMENTS),
        (ck.filter.is_some(), FLAG_FILTER),
        (!ck.use_appearance, FLAG_NO_APPEARANCE),
        (!ck.use_medium, FLAG_NO_MEDIUM),
    ] {
        if on {
            flags |= bit;
        }
    }
    put_u32(&mut buf, flags);
    put_u32(&mut buf, ck.active_sh_degree as u32);
    put_u64(&mut buf, ck.iteration);
    buf.extend_from_slice(&ck.extent.to_le_bytes());
    buf.extend_from_slice(&m.appearance.position_scale.to_le_bytes());
    for g in GroupId::ALL {
        put_f32s(&mut buf, &m.group(g));
    }
    if let Some(adam) = &ck.adam {
        put_u64(&mut buf, adam.step);
        for g in GroupId::ALL {
            put_f32s(&mut buf, &adam.m[g.index()]);
            put_f32s(&mut buf, &adam.v[g.index()]);
        }
    }
    if let Some(f) = &ck.filter {
        for x in f {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::CorruptFile(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

pub fn decode(data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { data, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let n = r.u64()? as usize;
    let sh_degree = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let bands = r.u32()? as usize;
    let candidates = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let flags = r.u32()?;
    let active_sh_degree = r.u32()? as usize;
    let iteration = r.u64()?;
    let extent = r.f64()?;
    let position_scale = r.f64()?;
    if sh_degree > sh::MAX_SH_DEGREE || active_sh_degree > sh_degree {
        return Err(Error::CorruptFile(format!("invalid SH degrees {sh_degree}/{active_sh_degree}")));
    }
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::CorruptFile(format!("unknown flags {flags:#x}")));
    }
    if n > data.len() || embed_dim > data.len() || hidden > data.len() || candidates > data.len() || bands > 64 {
        return Err(Error::CorruptFile("header counts exceed file size".into()));
    }

    let mut scene = Scene::empty(sh_degree);
    let stride = scene.sh_stride();
    let pose_len = Mlp::param_count(POSE_ENCODING_DIM, hidden, embed_dim);
    let correct_in = 3 + embed_dim + 6 * bands;
    let correct_len = Mlp::param_count(correct_in, hidden, 6);
    let att_len = AttenuationParams::param_count(candidates, embed_dim);
    scene.mu = r.f32s(3 * n)?;
    scene.quat = r.f32s(4 * n)?;
    scene.log_scale = r.f32s(3 * n)?;
    scene.raw_opacity = r.f32s(n)?;
    scene.sh = r.f32s(stride * n)?;
    let mut pose_mlp = Mlp::zeros(POSE_ENCODING_DIM, hidden, embed_dim);
    pose_mlp.params = r.f32s(pose_len)?;
    let mut correct_mlp = Mlp::zeros(correct_in, hidden, 6);
    correct_mlp.params = r.f32s(correct_len)?;
    let backscatter = BackscatterParams::from_flat(&r.f32s(crate::medium::BACKSCATTER_PARAM_COUNT)?);
    let mut attenuation = AttenuationParams::zeros(candidates, embed_dim);
    attenuation.set_flat(&r.f32s(att_len)?);
    let model = Model {
        scene,
        appearance: AppearanceNet { pose_mlp, correct_mlp, embed_dim, fourier_bands: bands, position_scale },
        medium: Medium { backscatter, attenuation },
    };

    let adam = if flags & FLAG_MOMENTS != 0 {
        let mut st = AdamState::new(&model);
        st.step = r.u64()?;
        for g in GroupId::ALL {
            let len = model.group_len(g);
            st.m[g.index()] = r.f32s(len)?;
            st.v[g.index()] = r.f32s(len)?;
        }
        Some(st)
    } else {
        None
    };
    let filter = if flags & FLAG_FILTER != 0 {
        Some((0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?)
    } else {
        None
    };
    if r.pos != data.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", data.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        adam,
        filter,
        iteration,
        active_sh_degree,
        extent,
        use_appearance: flags & FLAG_NO_APPEARANCE == 0,
        use_medium: flags & FLAG_NO_MEDIUM == 0,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Checkpoint {
    pub fn from_state(state: &crate::optim::TrainState, pipeline: &crate::diff::PipelineConfig, with_moments: bool) -> Self {
        Self {
            model: state.model.clone(),
            adam: with_moments.then(|| state.adam.clone()),
            filter: Some(state.filter.clone()),
            iteration: state.iteration,
            active_sh_degree: state.active_sh_degree,
            extent: state.extent,
            use_appearance: pipeline.use_appearance,
            use_medium: pipeline.use_medium,
        }
    }

    /// Training state; missing moments start at zero and a missing filter is disabled.
    pub fn into_state(self) -> crate::optim::TrainState {
        let n = self.model.scene.len();
        let adam = self.adam.unwrap_or_else(|| AdamState::new(&self.model));
        crate::optim::TrainState {
            adam,
            filter: self.filter.unwrap_or_else(|| vec![0.0; n]),
            iteration: self.iteration,
            active_sh_degree: self.active_sh_degree,
            extent: self.extent,
            model: self.model,
        }
    }
}

//! Forward builders for the six network blocks. Every builder is a pure
//! function of (config, bound parameters, inputs) on an autodiff graph:
//!
//! * `s_block`: stride-1 convs turning the body-relative map into features;
//! * `encode_static`: S + stride-2 encoder stack + linear to the latent;
//! * `decode_feature_map` / `vertex_head` / `decode_geometry`: latent to a
//!   2x-upsampled geometry feature map, bilinearly sampled per vertex and
//!   mapped to local displacements by an MLP;
//! * `motion_encoder`: velocity/acceleration + interaction maps to a motion
//!   feature map shaped like the S output;
//! * `encode_dynamic`: static + motion features to the latent.
//!
//! Convolutions are 3x3; every conv/transpose-conv is followed by instance
//! norm (eps 1e-5, no affine) and leaky-relu 0.2. Linear layers skip the
//! norm: their rows are single feature vectors, which per-channel spatial
//! normalization would zero out. Final projection layers (encoder fc,
//! vertex-head output) stay linear so latents and displacements are
//! unconstrained.

use std::rc::Rc;
use std::sync::Arc;

use gdyn_ad::{Graph, Real, Var};
use gdyn_core::diff::SampleUvOp;
use gdyn_core::SampleTable;

use crate::config::ArchConfig;
use crate::params::BoundParams;

const IN_EPS: f64 = 1e-5;
const LEAKY: f64 = 0.2;

fn conv_block<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
) -> Var {
    let y = g.conv2d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), stride, 1);
    let y = g.instance_norm(y, T::from_f64(IN_EPS));
    g.leaky_relu(y, T::from_f64(LEAKY))
}

fn tconv_block<T: Real>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Var {
    let y = g.conv2d_transpose(
        x,
        p.get(&format!("{name}.w")),
        p.get(&format!("{name}.b")),
        2,
        1,
        1,
    );
    let y = g.instance_norm(y, T::from_f64(IN_EPS));
    g.leaky_relu(y, T::from_f64(LEAKY))
}

/// S: [w, w, 3N] -> [w, w, F].
pub fn s_block<T: Real>(cfg: &ArchConfig, g: &mut Graph<T>, p: &BoundParams, m: Var) -> Var {
    let mut x = m;
    for i in 0..cfg.s_channels.len() {
        x = conv_block(g, p, &format!("s.conv{i}"), x, 1);
    }
    x
}

/// Shared encoder tail under a parameter prefix ("esta" or "edyn"):
/// stride-2 conv stages, flatten, final plain linear to the latent.
pub fn encoder_stack<T: Real>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    feat: Var,
) -> Var {
    let mut x = feat;
    for i in 0..cfg.e_channels.len() {
        x = conv_block(g, p, &format!("{prefix}.conv{i}"), x, 2);
    }
    let flat = g.reshape(x, vec![1, cfg.bottleneck_numel()]);
    g.linear(
        flat,
        p.get(&format!("{prefix}.fc.w")),
        p.get(&format!("{prefix}.fc.b")),
    )
}

/// Static path: body-relative map [w, w, 3N] -> latent [1, |Z|].
pub fn encode_static<T: Real>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    m_p: Var,
) -> Var {
    let feat = s_block(cfg, g, p, m_p);
    encoder_stack(cfg, g, p, "esta", feat)
}

/// D: latent [1, |Z|] -> geometry feature map [2w, 2w, F].
pub fn decode_feature_map<T: Real>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    z: Var,
) -> Var {
    let x = g.linear(z, p.get("d.fc.w"), p.get("d.fc.b"));
    let x = g.leaky_relu(x, T::from_f64(LEAKY));
    let b = cfg.bottleneck_width();
    let mut x = g.reshape(x, vec![b, b, *cfg.e_channels.last().unwrap()]);
    for i in 0..cfg.d_channels().len() {
        x = tconv_block(g, p, &format!("d.tconv{i}"), x);
    }
    tconv_block(g, p, "d.out", x)
}

/// R: per-vertex rows [V, F+2] (sampled feature ++ uv) -> displacements [V, 3].
pub fn vertex_head<T: Real>(cfg: &ArchConfig, g: &mut Graph<T>, p: &BoundParams, xi_uv: Var) -> Var {
    let mut x = xi_uv;
    for i in 0..cfg.r_hidden.len() {
        x = g.linear(x, p.get(&format!("r.fc{i}.w")), p.get(&format!("r.fc{i}.b")));
        x = g.leaky_relu(x, T::from_f64(LEAKY));
    }
    let last = cfg.r_hidden.len();
    g.linear(x, p.get(&format!("r.fc{last}.w")), p.get(&format!("r.fc{last}.b")))
}

/// Full decoder: latent -> per-vertex local-frame displacements [V, 3].
/// `sampler` must be built over the garment uvs at resolution 2w; `uv` is the
/// constant [V, 2] uv tensor concatenated into the vertex head input.
pub fn decode_geometry<T: Real>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    z: Var,
    sampler: &Arc<SampleTable>,
    uv: Var,
) -> Var {
    assert_eq!(sampler.width, cfg.xi_width(), "sampler resolution must be 2w");
    let m_xi = decode_feature_map(cfg, g, p, z);
    let xi = g.custom(
        Rc::new(SampleUvOp {
            table: sampler.clone(),
        }),
        &[m_xi],
    );
    let xi_uv = g.concat_cols(xi, uv);
    vertex_head(cfg, g, p, xi_uv)
}

/// C: motion map [w, w, 6] ++ interaction map [w, w, 3N] -> [w, w, F].
pub fn motion_encoder<T: Real>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    m_motion: Var,
    m_interact: Var,
) -> Var {
    let mut x = g.concat_chan(m_motion, m_interact);
    for i in 0..cfg.c_channels.len() {
        x = conv_block(g, p, &format!("c.conv{i}"), x, 1);
    }
    x
}

/// Dynamic encoder: S(M^P_{t-1}) [w, w, F] ++ E_t [w, w, F] -> latent
/// [1, |Z|]. Passing an all-zero E_t realizes the virtual-sample pathway.
pub fn encode_dynamic<T: Real>(
    cfg: &ArchConfig,
    g: &mut Graph<T>,
    p: &BoundParams,
    s_prev: Var,
    e_t: Var,
) -> Var {
    let x = g.concat_chan(s_prev, e_t);
    encoder_stack(cfg, g, p, "edyn", x)
}

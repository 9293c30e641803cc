//! `NNWT` weight files and warm starting.
//!
//! Layout (little-endian): magic `NNWT`, version u16, topology tag u8 and
//! its hyperparameters, Adam step u64, layer count u32, then per layer a
//! kind tag u8, its shape dims as u32, f32 weights, f32 biases, a moments
//! flag u8 and, when set, the four f32 moment arrays.

use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_array, read_f32s, write_f32s};
use crate::nn::network::{Layer, LayerKind, Network, Topology};

const MAGIC: &[u8; 4] = b"NNWT";
const VERSION: u16 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "NNWT",
        reason: reason.into(),
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r)?) as usize)
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_array::<1>(r)?[0])
}

pub fn write_weights(net: &Network<f32>, include_moments: bool, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    match &net.topology {
        Topology::Vdsr { depth, width } => {
            w.write_all(&[0])?;
            put_u32(w, *depth)?;
            put_u32(w, *width)?;
        }
        Topology::UNet { widths, residual } => {
            w.write_all(&[1])?;
            for &c in widths {
                put_u32(w, c)?;
            }
            w.write_all(&[u8::from(*residual)])?;
        }
    }
    w.write_all(&net.adam_step.to_le_bytes())?;
    put_u32(w, net.layers.len())?;
    for layer in &net.layers {
        match layer.kind {
            LayerKind::Conv { k, in_c, out_c } => {
                w.write_all(&[0])?;
                put_u32(w, k)?;
                put_u32(w, in_c)?;
                put_u32(w, out_c)?;
            }
            LayerKind::TConv { in_c, out_c } => {
                w.write_all(&[1])?;
                put_u32(w, in_c)?;
                put_u32(w, out_c)?;
            }
            LayerKind::MaxPool => w.write_all(&[2])?,
            LayerKind::Relu => w.write_all(&[3])?,
            LayerKind::ConcatSkip { from } => {
                w.write_all(&[4])?;
                put_u32(w, from)?;
            }
            LayerKind::ResidualAddInput => w.write_all(&[5])?,
        }
        write_f32s(w, &layer.weight)?;
        write_f32s(w, &layer.bias)?;
        w.write_all(&[u8::from(include_moments)])?;
        if include_moments {
            for m in [&layer.adam_m_w, &layer.adam_v_w, &layer.adam_m_b, &layer.adam_v_b] {
                write_f32s(w, m)?;
            }
        }
    }
    Ok(())
}

/// Weights, plus whether any Adam moments were stored.
pub fn read_weights(r: &mut impl Read) -> Result<(Network<f32>, bool)> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let topology = match get_u8(r)? {
        0 => Topology::Vdsr {
            depth: get_u32(r)?,
            width: get_u32(r)?,
        },
        1 => Topology::UNet {
            widths: [get_u32(r)?, get_u32(r)?, get_u32(r)?],
            residual: get_u8(r)? != 0,
        },
        t => return Err(bad(format!("unknown topology tag {t}"))),
    };
    let adam_step = u64::from_le_bytes(read_array(r)?);
    let n_layers = get_u32(r)?;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    let mut any_moments = false;
    for i in 0..n_layers {
        let kind = match get_u8(r)? {
            0 => LayerKind::Conv {
                k: get_u32(r)?,
                in_c: get_u32(r)?,
                out_c: get_u32(r)?,
            },
            1 => LayerKind::TConv {
                in_c: get_u32(r)?,
                out_c: get_u32(r)?,
            },
            2 => LayerKind::MaxPool,
            3 => LayerKind::Relu,
            4 => LayerKind::ConcatSkip { from: get_u32(r)? },
            5 => LayerKind::ResidualAddInput,
            t => return Err(bad(format!("layer {i}: unknown kind tag {t}"))),
        };
        let (nw, nb) = kind.param_counts();
        let mut layer = Layer::<f32>::new(kind);
        layer.weight = read_f32s(r, nw)?;
        layer.bias = read_f32s(r, nb)?;
        match get_u8(r)? {
            0 => {}
            1 => {
                any_moments = true;
                layer.adam_m_w = read_f32s(r, nw)?;
                layer.adam_v_w = read_f32s(r, nw)?;
                layer.adam_m_b = read_f32s(r, nb)?;
                layer.adam_v_b = read_f32s(r, nb)?;
            }
            f => return Err(bad(format!("layer {i}: bad moments flag {f}"))),
        }
        if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stored weights"));
        }
        layers.push(layer);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((
        Network {
            topology,
            layers,
            adam_step,
        },
        any_moments,
    ))
}

pub fn save_weights(net: &Network<f32>, include_moments: bool, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_weights(net, include_moments, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(Network<f32>, bool)> {
    read_weights(&mut BufReader::new(std::fs::File::open(path)?))
}

/// Line-per-difference comparison of two layer stacks; empty when they match.
pub fn topology_diff<T, U>(expected: &Network<T>, found: &Network<U>) -> String {
    let mut out = String::new();
    if expected.topology != found.topology {
        let _ = writeln!(
            out,
            "topology: expected {:?}, found {:?}",
            expected.topology, found.topology
        );
    }
    if expected.layers.len() != found.layers.len() {
        let _ = writeln!(
            out,
            "layer count: expected {}, found {}",
            expected.layers.len(),
            found.layers.len()
        );
    }
    for (i, (a, b)) in expected.layers.iter().zip(&found.layers).enumerate() {
        if a.kind != b.kind {
            let _ = writeln!(out, "layer {i}: expected {:?}, found {:?}", a.kind, b.kind);
        }
    }
    out
}

/// Copy weights from a stored network into `net`. Adam moments are copied
/// only when requested and present; otherwise they are reset.
pub fn warm_start_from(net: &mut Network<f32>, source: &Network<f32>, load_moments: bool) -> Result<()> {
    let diff = topology_diff(net, source);
    if !diff.is_empty() {
        return Err(Error::Topology(diff.trim_end().to_string()));
    }
    net.clear_moments();
    for (dst, src) in net.layers.iter_mut().zip(&source.layers) {
        dst.weight.clone_from(&src.weight);
        dst.bias.clone_from(&src.bias);
        if load_moments {
            dst.adam_m_w.clone_from(&src.adam_m_w);
            dst.adam_v_w.clone_from(&src.adam_v_w);
            dst.adam_m_b.clone_from(&src.adam_m_b);
            dst.adam_v_b.clone_from(&src.adam_v_b);
        }
    }
    if load_moments {
        net.adam_step = source.adam_step;
    }
    Ok(())
}

pub fn warm_start(net: &mut Network<f32>, path: impl AsRef<Path>, load_moments: bool) -> Result<()> {
    let (source, has_moments) = load_weights(path)?;
    warm_start_from(net, &source, load_moments && has_moments)
}

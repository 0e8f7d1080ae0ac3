//! "ADVART-DET v1" container: magic line, manifest, then little-endian f64
//! weight and bias blobs in layer order.
//!
//! ```text
//! ADVART-DET v1\n
//! u64 input_size, u64 num_classes, u64 hidden layers
//! u64 channels[hidden]
//! f64 anchor_w, f64 anchor_h, f64 leaky_slope
//! u64 layers, then per layer: u64 out, in, k, stride, pad
//! per layer: f64 weight[out·in·k·k], f64 bias[out]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ConvLayer, DetectorConfig, GridDetector};
use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

pub const DETECTOR_MAGIC: &[u8] = b"ADVART-DET v1\n";
const MAX_DIM: u64 = 1 << 16;

pub fn write_detector(model: &GridDetector, w: &mut impl Write) -> std::io::Result<()> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(DETECTOR_MAGIC);
    let u = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u64).to_le_bytes());
    u(cfg.input_size, &mut out);
    u(cfg.num_classes, &mut out);
    u(cfg.channels.len(), &mut out);
    for &c in &cfg.channels {
        u(c, &mut out);
    }
    for f in [cfg.anchor.0, cfg.anchor.1, cfg.leaky_slope] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    u(model.layers().len(), &mut out);
    for l in model.layers() {
        let s = l.weight.shape();
        for v in [s[0], s[1], s[2], l.stride, l.pad] {
            u(v, &mut out);
        }
    }
    for l in model.layers() {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take8(&mut self) -> Result<[u8; 8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::Checkpoint("detector checkpoint is truncated".into()))?;
        self.pos += 8;
        Ok(s.try_into().unwrap())
    }

    fn dim(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take8()?);
        if v > MAX_DIM {
            return Err(Error::Checkpoint(format!("implausible dimension {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take8()?))
    }
}

pub fn read_detector(r: &mut impl Read) -> Result<GridDetector> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("reading detector: {e}")))?;
    if !bytes.starts_with(DETECTOR_MAGIC) {
        return Err(Error::Checkpoint("missing ADVART-DET v1 header".into()));
    }
    let mut rd = Reader {
        bytes: &bytes,
        pos: DETECTOR_MAGIC.len(),
    };
    let input_size = rd.dim()?;
    let num_classes = rd.dim()?;
    let hidden = rd.dim()?;
    let channels = (0..hidden).map(|_| rd.dim()).collect::<Result<Vec<_>>>()?;
    let anchor = (rd.f64()?, rd.f64()?);
    let leaky_slope = rd.f64()?;
    let n_layers = rd.dim()?;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push([rd.dim()?, rd.dim()?, rd.dim()?, rd.dim()?, rd.dim()?]);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for [o, i, k, stride, pad] in shapes {
        let weight = Tensor::new([o, i, k, k], (0..o * i * k * k).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?)?;
        let bias = Tensor::new([o], (0..o).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?)?;
        layers.push(ConvLayer {
            weight,
            bias,
            stride,
            pad,
        });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    let kernels = layers.iter().map(|l| l.weight.shape()[2]).collect();
    let config = DetectorConfig {
        input_size,
        channels,
        kernels,
        num_classes,
        anchor,
        leaky_slope,
    };
    let mut expected_in = 3;
    for (idx, l) in layers.iter().enumerate() {
        let s = l.weight.shape();
        let expected_out = config.channels.get(idx).copied().unwrap_or(config.outputs_per_cell());
        if s[1] != expected_in || s[0] != expected_out {
            return Err(Error::Checkpoint(format!("layer {idx} has shape {s:?}")));
        }
        expected_in = s[0];
    }
    GridDetector::from_parts(config, layers)
}

pub fn save_detector(model: &GridDetector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_detector(model, &mut f).map_err(|e| Error::io(path, e))
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<GridDetector> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_detector(&mut f)
}

//! `PRNW` checkpoints: a network's layout, parameters and prune mask.
//!
//! All integers are little-endian `u32`, all parameters little-endian `f64`:
//!
//! ```text
//! "PRNW" version loss_kind in_c in_h in_w num_layers
//! per layer: kind in out kernel stride pad has_bias
//! per parameter layer: weights, then bias if present
//! per conv layer: ceil(out/8) mask bytes, channel i at bit i%8 of byte i/8
//! ```
//!
//! Kind codes: conv 0, relu 1, max_pool 2, gap 3, dense 4, flatten 5. Loss
//! codes: softmax cross-entropy 0, mean squared error 1.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, LossKind, NetworkGraph, PruneMask};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRNW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn kind_code(k: LayerKind) -> u32 {
    match k {
        LayerKind::Conv => 0,
        LayerKind::Relu => 1,
        LayerKind::MaxPool => 2,
        LayerKind::Gap => 3,
        LayerKind::Dense => 4,
        LayerKind::Flatten => 5,
    }
}

fn kind_from(code: u32) -> Option<LayerKind> {
    Some(match code {
        0 => LayerKind::Conv,
        1 => LayerKind::Relu,
        2 => LayerKind::MaxPool,
        3 => LayerKind::Gap,
        4 => LayerKind::Dense,
        5 => LayerKind::Flatten,
        _ => return None,
    })
}

pub fn to_bytes(net: &NetworkGraph) -> Vec<u8> {
    let mut out = Vec::new();
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    u(&mut out, CHECKPOINT_VERSION as usize);
    u(
        &mut out,
        match net.loss_kind() {
            LossKind::SoftmaxCrossEntropy => 0,
            LossKind::MeanSquaredError => 1,
        },
    );
    for v in net.input_shape() {
        u(&mut out, v);
    }
    u(&mut out, net.layers().len());
    for l in net.layers() {
        let s = &l.spec;
        for v in [
            kind_code(s.kind) as usize,
            s.in_channels,
            s.out_channels,
            s.kernel,
            s.stride,
            s.pad,
            usize::from(s.has_bias),
        ] {
            u(&mut out, v);
        }
    }
    for l in net.layers() {
        for t in l.weight.iter().chain(l.bias.iter()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for (i, l) in net.layers().iter().enumerate() {
        if l.spec.kind != LayerKind::Conv {
            continue;
        }
        let mut bytes = vec![0u8; l.spec.out_channels.div_ceil(8)];
        for (c, &p) in net.mask().channels(i).iter().enumerate() {
            if p {
                bytes[c / 8] |= 1 << (c % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format { format: "PRNW", offset: self.pos as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(out.len() * 8)?;
        for (o, b) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkGraph> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let loss = match r.u32()? {
        0 => LossKind::SoftmaxCrossEntropy,
        1 => LossKind::MeanSquaredError,
        other => {
            r.pos -= 4;
            return Err(r.err(format!("unknown loss code {other}")));
        }
    };
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let n = r.u32()?;
    if n > 4096 {
        r.pos -= 4;
        return Err(r.err(format!("implausible layer count {n}")));
    }
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let code = r.u32()? as u32;
        let kind = kind_from(code).ok_or_else(|| Error::Format {
            format: "PRNW",
            offset: at as u64,
            detail: format!("unknown layer kind {code}"),
        })?;
        let [in_channels, out_channels, kernel, stride, pad, bias] =
            [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        specs.push(LayerSpec { kind, in_channels, out_channels, kernel, stride, pad, has_bias: bias != 0 });
    }
    let table_end = r.pos;
    let mut net = NetworkGraph::new(input, &specs, loss).map_err(|e| Error::Format {
        format: "PRNW",
        offset: table_end as u64,
        detail: format!("invalid layer table: {e}"),
    })?;
    for l in 0..n {
        if let Some(w) = net.weight_mut(l) {
            r.f64s(w.data_mut())?;
        }
        if let Some(b) = net.bias_mut(l) {
            r.f64s(b.data_mut())?;
        }
    }
    let mut mask = PruneMask::empty_for(net.layers());
    for l in net.conv_layers() {
        let m = net.layer(l).spec.out_channels;
        let at = r.pos;
        let bits = r.take(m.div_ceil(8))?.to_vec();
        for c in 0..m {
            if bits[c / 8] >> (c % 8) & 1 == 1 {
                mask.set(l, c);
            }
        }
        if m % 8 != 0 && bits[m / 8] >> (m % 8) != 0 {
            return Err(Error::Format {
                format: "PRNW",
                offset: (at + m / 8) as u64,
                detail: "mask padding bits set".into(),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    net.set_mask(mask)?;
    Ok(net)
}

pub fn save(net: &NetworkGraph, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelName;
    use crate::network::ChannelId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_with_mask() {
        let mut net = ModelName::Lenet5Like.build().unwrap();
        net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        crate::prune::prune_channel(&mut net, ChannelId::new(0, 2)).unwrap();
        crate::prune::prune_channel(&mut net, ChannelId::new(3, 9)).unwrap();
        let bytes = to_bytes(&net);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = ModelName::Lenet5Like.build().unwrap();
        let bytes = to_bytes(&net);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[0] = 0;
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }
}

//! Network, displacement-field and feature-field checkpoints. Parameters are
//! always stored as f64 whatever the in-memory scalar type.

use std::path::Path;

use super::bytes::{ByteReader, ByteWriter};
use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::feature_field::{Downsampler, FeatureField, FeatureSource};
use crate::flow_field::{DisplacementField, PairMeta};
use crate::geometry::Canvas;
use crate::numerics::{Activation, SirenConfig, SirenNet};
use crate::scalar::Scalar;

pub const SIRN_MAGIC: &[u8; 4] = b"SIRN";
pub const DFLD_MAGIC: &[u8; 4] = b"DFLD";
pub const FFLD_MAGIC: &[u8; 4] = b"FFLD";
pub const CHECKPOINT_VERSION: u16 = 1;

fn activation_code(a: Activation) -> (u32, usize) {
    match a {
        Activation::Sine => (0, 0),
        Activation::Relu => (1, 0),
        Activation::ReluPe { n_frequencies } => (2, n_frequencies),
    }
}

fn put_net<T: Scalar>(out: &mut ByteWriter, net: &SirenNet<T>) -> Result<()> {
    let c = net.config();
    out.bytes(SIRN_MAGIC);
    out.u16(CHECKPOINT_VERSION);
    for n in [c.in_dim, c.hidden_dim, c.n_hidden_layers, c.out_dim] {
        out.u32(n)?;
    }
    out.f64(c.omega0);
    let (code, freqs) = activation_code(c.activation);
    out.u32(code as usize)?;
    out.u32(freqs)?;
    out.u64(net.seed());
    out.u64(net.param_count() as u64);
    for p in net.params() {
        out.f64(p.f64());
    }
    Ok(())
}

fn get_net<T: Scalar>(r: &mut ByteReader) -> Result<SirenNet<T>> {
    r.magic(SIRN_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let cfg_at = r.offset();
    let in_dim = r.count("in_dim")?;
    let hidden_dim = r.count("hidden_dim")?;
    let n_hidden_layers = r.count("n_hidden_layers")?;
    let out_dim = r.count("out_dim")?;
    let omega0 = r.f64("omega0")?;
    let code_at = r.offset();
    let code = r.u32("activation")?;
    let freqs = r.u32("n_frequencies")? as usize;
    let activation = match (code, freqs) {
        (0, 0) => Activation::Sine,
        (1, 0) => Activation::Relu,
        (2, n) if n > 0 => Activation::ReluPe { n_frequencies: n },
        _ => return Err(Error::format(code_at, format!("bad activation code {code} with {freqs} frequencies"))),
    };
    let config = SirenConfig {
        in_dim,
        hidden_dim,
        n_hidden_layers,
        out_dim,
        omega0,
        activation,
    };
    config
        .validate()
        .map_err(|e| Error::format(cfg_at, format!("invalid network config: {e}")))?;
    let seed = r.u64("seed")?;
    let count_at = r.offset();
    let count = r.u64("parameter count")?;
    let expected = config.param_count();
    if count != expected as u64 {
        return Err(Error::format(
            count_at,
            format!("parameter count {count} does not match config ({expected})"),
        ));
    }
    let params = r.f64s(expected, "parameters")?;
    SirenNet::from_params(config, seed, params.into_iter().map(T::of).collect())
}

pub fn encode_net<T: Scalar>(net: &SirenNet<T>) -> Result<Vec<u8>> {
    let mut out = ByteWriter::default();
    put_net(&mut out, net)?;
    Ok(out.buf)
}

pub fn decode_net<T: Scalar>(bytes: &[u8]) -> Result<SirenNet<T>> {
    let mut r = ByteReader::new(bytes);
    let net = get_net(&mut r)?;
    r.finish("network")?;
    Ok(net)
}

pub fn encode_displacement<T: Scalar>(field: &DisplacementField<T>) -> Result<Vec<u8>> {
    let mut out = ByteWriter::default();
    out.bytes(DFLD_MAGIC);
    out.u16(CHECKPOINT_VERSION);
    put_net(&mut out, &field.net)?;
    let meta = serde_json::to_string(&field.meta).expect("pair metadata serializes");
    out.string(&meta)?;
    Ok(out.buf)
}

/// The loss trace is not stored; the loaded field has an empty trace.
pub fn decode_displacement<T: Scalar>(bytes: &[u8]) -> Result<DisplacementField<T>> {
    let mut r = ByteReader::new(bytes);
    r.magic(DFLD_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let net_at = r.offset();
    let net = get_net::<T>(&mut r)?;
    let c = net.config();
    if c.in_dim != 2 || c.out_dim != 2 {
        return Err(Error::format(net_at, "displacement network must map 2 inputs to 2 outputs"));
    }
    let meta_at = r.offset() + 4;
    let text = r.string("pair metadata")?;
    let meta: PairMeta = serde_json::from_str(&text)
        .map_err(|e| Error::format(meta_at, format!("bad pair metadata: {e}")))?;
    if meta.canvas.width == 0 || meta.canvas.height == 0 {
        return Err(Error::format(meta_at, "pair canvas must be non-empty"));
    }
    r.finish("pair metadata")?;
    Ok(DisplacementField {
        net,
        meta,
        trace: Vec::new(),
    })
}

pub fn encode_feature_field<T: Scalar>(field: &FeatureField<T>) -> Result<Vec<u8>> {
    let mut out = ByteWriter::default();
    out.bytes(FFLD_MAGIC);
    out.u16(CHECKPOINT_VERSION);
    let (canvas, grid) = (field.canvas(), field.grid());
    for n in [canvas.width, canvas.height, grid.width, grid.height, field.frames()] {
        out.u32(n)?;
    }
    let ds = &field.downsampler;
    let ((kh, kw), (sy, sx)) = (ds.kernel_size(), ds.stride());
    for n in [kh, kw, sy, sx] {
        out.u32(n)?;
    }
    for v in ds.raw() {
        out.f64(v.f64());
    }
    put_net(&mut out, &field.net)?;
    out.string(field.video_id())?;
    out.string(field.source_tag())?;
    Ok(out.buf)
}

pub fn decode_feature_field<T: Scalar>(bytes: &[u8]) -> Result<FeatureField<T>> {
    let mut r = ByteReader::new(bytes);
    r.magic(FFLD_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let canvas = Canvas::new(r.count("canvas width")?, r.count("canvas height")?);
    let grid = Canvas::new(r.count("grid width")?, r.count("grid height")?);
    let frames = r.count("frame count")?;
    let ds_at = r.offset();
    let (kh, kw) = (r.count("kernel height")?, r.count("kernel width")?);
    let (sy, sx) = (r.count("stride y")?, r.count("stride x")?);
    let n = kh
        .checked_mul(kw)
        .ok_or_else(|| r.error("kernel size overflows"))?;
    let raw = r.f64s(n, "kernel")?;
    let downsampler = Downsampler::from_raw(kh, kw, sy, sx, raw.into_iter().map(T::of).collect())
        .map_err(|e| Error::format(ds_at, format!("invalid downsampler: {e}")))?;
    let net_at = r.offset();
    let net = get_net::<T>(&mut r)?;
    let video_id = r.string("video id")?;
    let source_tag = r.string("source tag")?;
    r.finish("source tag")?;
    let field = FeatureField::from_parts(net, downsampler, canvas, grid, frames)
        .map_err(|e| Error::format(net_at, e.to_string()))?;
    Ok(field.with_video_id(video_id).with_source_tag(source_tag))
}

pub fn read_net<T: Scalar>(path: impl AsRef<Path>) -> Result<SirenNet<T>> {
    let path = path.as_ref();
    decode_net(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_net<T: Scalar>(net: &SirenNet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_net(net)?)
}

pub fn read_displacement<T: Scalar>(path: impl AsRef<Path>) -> Result<DisplacementField<T>> {
    let path = path.as_ref();
    decode_displacement(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_displacement<T: Scalar>(field: &DisplacementField<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_displacement(field)?)
}

pub fn read_feature_field<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureField<T>> {
    let path = path.as_ref();
    decode_feature_field(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_feature_field<T: Scalar>(field: &FeatureField<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_feature_field(field)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(activation: Activation) -> SirenNet<f64> {
        SirenNet::init(SirenConfig::sine(3, 5, 2, 4).with_activation(activation), 11).unwrap()
    }

    #[test]
    fn net_round_trip_every_activation() {
        for a in [Activation::Sine, Activation::Relu, Activation::ReluPe { n_frequencies: 3 }] {
            let net = small_net(a);
            let b = encode_net(&net).unwrap();
            assert_eq!(b.len(), 4 + 2 + 16 + 8 + 8 + 8 + 8 + 8 * net.param_count());
            let back = decode_net::<f64>(&b).unwrap();
            assert_eq!(back, net);
            assert_eq!(encode_net(&back).unwrap(), b);
        }
    }

    #[test]
    fn f32_net_widens_losslessly() {
        let net = small_net(Activation::Sine).cast::<f32>();
        let back = decode_net::<f32>(&encode_net(&net).unwrap()).unwrap();
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn param_count_mismatch_is_reported() {
        let mut b = encode_net(&small_net(Activation::Sine)).unwrap();
        let at = 4 + 2 + 16 + 8 + 8 + 8;
        b[at] ^= 1;
        assert!(matches!(decode_net::<f64>(&b), Err(Error::Format { offset, .. }) if offset == at as u64));
    }

    #[test]
    fn net_truncations_fail_cleanly() {
        let b = encode_net(&SirenNet::<f64>::init(SirenConfig::sine(2, 2, 1, 2), 0).unwrap()).unwrap();
        for len in 0..b.len() {
            assert!(matches!(decode_net::<f64>(&b[..len]), Err(Error::Format { .. })), "prefix {len}");
        }
    }

    #[test]
    fn displacement_round_trip() {
        let net = SirenNet::<f64>::init(SirenConfig::sine(2, 8, 1, 2), 3).unwrap();
        let meta = PairMeta {
            src_video: "a".into(),
            src_t: 0,
            tgt_video: "b".into(),
            tgt_t: 4,
            canvas: Canvas::new(20, 10),
        };
        let f = DisplacementField { net, meta, trace: vec![1.0] };
        let b = encode_displacement(&f).unwrap();
        let back = decode_displacement::<f64>(&b).unwrap();
        assert_eq!(back.net, f.net);
        assert_eq!(back.meta, f.meta);
        assert!(back.trace.is_empty());
        for len in 0..b.len() {
            assert!(matches!(decode_displacement::<f64>(&b[..len]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn feature_field_round_trip() {
        let net = SirenNet::<f64>::init(SirenConfig::sine(3, 6, 2, 3), 9).unwrap();
        let ds = Downsampler::from_raw(2, 3, 2, 2, vec![1.0, -2.0, 0.5, 0.25, 1.0, 3.0]).unwrap();
        let f = FeatureField::from_parts(net, ds, Canvas::new(8, 6), Canvas::new(4, 3), 2)
            .unwrap()
            .with_video_id("echo-7")
            .with_source_tag("tag");
        let b = encode_feature_field(&f).unwrap();
        let back = decode_feature_field::<f64>(&b).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode_feature_field(&back).unwrap(), b);
        for len in 0..b.len() {
            assert!(matches!(decode_feature_field::<f64>(&b[..len]), Err(Error::Format { .. })));
        }
    }
}

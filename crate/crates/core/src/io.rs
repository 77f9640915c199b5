//! Binary weight container.
//!
//! Layout: magic `TWG1`, then the header `(num_layers, hidden_dim,
//! num_heads, ffn_dim, vocab_size, max_positions)` as little-endian u32,
//! then the base tensors as raw little-endian f64 in declaration order:
//! embedding, positional, per layer (w_q, w_k, w_v, w_o, ffn_in, ffn_out,
//! norm1 scale/bias, norm2 scale/bias), head, final norm scale/bias.
//!
//! A twig section may follow: the ASCII tag `twig`, `(shared_depth,
//! twig_depth, init_strategy)` as u32, then the twig layers, head, and final
//! norm in the same per-layer order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, Model, ModelConfig, NormParams};
use crate::tensor::Mat;
use crate::twig::{InitStrategy, TwigConfig, TwigModel};

const MAGIC: &[u8; 4] = b"TWG1";
const TWIG_TAG: &[u8; 4] = b"twig";

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_layer(w: &mut impl Write, layer: &LayerWeights) -> Result<()> {
    write_f64s(w, layer.w_q.data())?;
    write_f64s(w, layer.w_k.data())?;
    write_f64s(w, layer.w_v.data())?;
    write_f64s(w, layer.w_o.data())?;
    write_f64s(w, layer.ffn_in.data())?;
    write_f64s(w, layer.ffn_out.data())?;
    write_f64s(w, &layer.norm1.scale)?;
    write_f64s(w, &layer.norm1.bias)?;
    write_f64s(w, &layer.norm2.scale)?;
    write_f64s(w, &layer.norm2.bias)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated tensor data".into()))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    Ok(Mat::from_vec(rows, cols, read_f64s(r, rows * cols)?))
}

fn read_norm(r: &mut impl Read, d: usize) -> Result<NormParams> {
    Ok(NormParams { scale: read_f64s(r, d)?, bias: read_f64s(r, d)? })
}

fn read_layer(r: &mut impl Read, d: usize, d_ff: usize) -> Result<LayerWeights> {
    Ok(LayerWeights {
        w_q: read_mat(r, d, d)?,
        w_k: read_mat(r, d, d)?,
        w_v: read_mat(r, d, d)?,
        w_o: read_mat(r, d, d)?,
        ffn_in: read_mat(r, d, d_ff)?,
        ffn_out: read_mat(r, d_ff, d)?,
        norm1: read_norm(r, d)?,
        norm2: read_norm(r, d)?,
    })
}

fn write_base(w: &mut impl Write, model: &Model) -> Result<()> {
    let cfg = model.config();
    w.write_all(MAGIC)?;
    write_u32(w, cfg.num_layers)?;
    write_u32(w, cfg.hidden_dim)?;
    write_u32(w, cfg.num_heads)?;
    write_u32(w, cfg.ffn_dim)?;
    write_u32(w, cfg.vocab_size)?;
    write_u32(w, cfg.max_positions)?;
    write_f64s(w, model.embedding.data())?;
    write_f64s(w, model.positional.data())?;
    for layer in &model.layers {
        write_layer(w, layer)?;
    }
    write_f64s(w, model.head.data())?;
    write_f64s(w, &model.final_norm.scale)?;
    write_f64s(w, &model.final_norm.bias)?;
    Ok(())
}

fn read_base(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic (expected TWG1)".into()));
    }
    let cfg = ModelConfig {
        num_layers: read_u32(r)?,
        hidden_dim: read_u32(r)?,
        num_heads: read_u32(r)?,
        ffn_dim: read_u32(r)?,
        vocab_size: read_u32(r)?,
        max_positions: read_u32(r)?,
    };
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let embedding = read_mat(r, cfg.vocab_size, d)?;
    let positional = read_mat(r, cfg.max_positions, d)?;
    let layers = (0..cfg.num_layers)
        .map(|_| read_layer(r, d, cfg.ffn_dim))
        .collect::<Result<Vec<_>>>()?;
    let head = read_mat(r, d, cfg.vocab_size)?;
    let final_norm = read_norm(r, d)?;
    Model::from_parts(cfg, embedding, positional, layers, head, final_norm)
}

fn strategy_code(s: InitStrategy) -> usize {
    match s {
        InitStrategy::Random => 0,
        InitStrategy::LastLayers => 1,
        InitStrategy::LayersKtoKT => 2,
    }
}

fn strategy_from_code(code: usize) -> Result<InitStrategy> {
    match code {
        0 => Ok(InitStrategy::Random),
        1 => Ok(InitStrategy::LastLayers),
        2 => Ok(InitStrategy::LayersKtoKT),
        other => Err(Error::Format(format!("unknown init strategy code {other}"))),
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_base(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_base(&mut r)
}

pub fn save_twig_model(path: impl AsRef<Path>, tm: &TwigModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_base(&mut w, tm.base())?;
    w.write_all(TWIG_TAG)?;
    let cfg = tm.cfg();
    write_u32(&mut w, cfg.shared_depth)?;
    write_u32(&mut w, cfg.twig_depth)?;
    write_u32(&mut w, strategy_code(cfg.init))?;
    for layer in &tm.twig_layers {
        write_layer(&mut w, layer)?;
    }
    write_f64s(&mut w, tm.twig_head.data())?;
    write_f64s(&mut w, &tm.twig_final_norm.scale)?;
    write_f64s(&mut w, &tm.twig_final_norm.bias)?;
    w.flush()?;
    Ok(())
}

pub fn load_twig_model(path: impl AsRef<Path>) -> Result<TwigModel> {
    let mut r = BufReader::new(File::open(path)?);
    let base = read_base(&mut r)?;
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag).map_err(|_| Error::Format("missing twig section".into()))?;
    if &tag != TWIG_TAG {
        return Err(Error::Format("expected twig section tag".into()));
    }
    let cfg = TwigConfig {
        shared_depth: read_u32(&mut r)?,
        twig_depth: read_u32(&mut r)?,
        init: strategy_from_code(read_u32(&mut r)?)?,
    };
    let (d, d_ff, v) =
        (base.config().hidden_dim, base.config().ffn_dim, base.config().vocab_size);
    let layers = (0..cfg.twig_depth)
        .map(|_| read_layer(&mut r, d, d_ff))
        .collect::<Result<Vec<_>>>()?;
    let head = read_mat(&mut r, d, v)?;
    let norm = read_norm(&mut r, d)?;
    TwigModel::from_parts(base, cfg, layers, head, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::twig::attach_twig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 11,
            max_positions: 24,
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.twg");
        let model = init_model(&cfg(), 77).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.checksum(), model.checksum());
        assert_eq!(loaded.config(), model.config());
    }

    #[test]
    fn twig_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("twig.twg");
        let base = init_model(&cfg(), 78).unwrap();
        let tm = attach_twig(
            base,
            TwigConfig { shared_depth: 1, twig_depth: 2, init: InitStrategy::Random },
            9,
        )
        .unwrap();
        save_twig_model(&path, &tm).unwrap();
        let loaded = load_twig_model(&path).unwrap();
        assert_eq!(loaded.twig_checksum(), tm.twig_checksum());
        assert_eq!(loaded.base().checksum(), tm.base().checksum());
        assert_eq!(loaded.cfg(), tm.cfg());
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.twg");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));

        // Truncation mid-tensor.
        let good = dir.path().join("good.twg");
        let model = init_model(&cfg(), 79).unwrap();
        save_model(&good, &model).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));

        // A plain model file has no twig section.
        assert!(load_twig_model(&good).is_err());
    }
}

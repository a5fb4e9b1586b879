//! Manifold model files.
//!
//! Layout (little-endian): magic `UDM1`, `u8` kind (0 = PCA, 1 = AE), then
//!
//! * PCA: `u32` n_comp, `u32` d_in, mean (`d_in` f64), components
//!   (`n_comp × d_in` f64), explained-variance ratios (`n_comp` f64).
//! * AE: `u32` d_in, `u32` d_latent, `u32` n_hidden, `n_hidden × u32` widths,
//!   `u8` hidden activation, `u8` output activation, `u8` variational,
//!   `f64` kl_weight, then every layer's weights and bias (encoder,
//!   log-variance head if variational, decoder) as f64, then `u8`
//!   has_losses and, if set, `f64` mse and `f64` kl.

use std::path::Path;

use super::ae::{Activation, AeLosses, AeModel, AeSpec};
use super::{ManifoldModel, PcaModel};
use crate::data::io::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::math::mlp::DenseLayer;
use crate::math::Tensor;

pub const MANIFOLD_MAGIC: [u8; 4] = *b"UDM1";

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::config("dimension", "exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
    }
}

fn act_from(code: u8) -> Result<Activation> {
    Ok(match code {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::Sigmoid,
        c => return Err(Error::Malformed(format!("activation code {c}"))),
    })
}

pub fn encode(model: &ManifoldModel) -> Result<Vec<u8>> {
    let mut out = MANIFOLD_MAGIC.to_vec();
    match model {
        ManifoldModel::Pca(p) => {
            out.push(0);
            put_u32(&mut out, p.n_components())?;
            put_u32(&mut out, p.d_in())?;
            put_f64s(&mut out, &p.mean);
            put_f64s(&mut out, p.components.data());
            put_f64s(&mut out, &p.explained_variance_ratio);
        }
        ManifoldModel::Ae(a) => {
            out.push(1);
            let s = &a.spec;
            put_u32(&mut out, s.d_in)?;
            put_u32(&mut out, s.d_latent)?;
            put_u32(&mut out, s.hidden.len())?;
            for &h in &s.hidden {
                put_u32(&mut out, h)?;
            }
            out.push(act_code(s.hidden_activation));
            out.push(act_code(s.output_activation));
            out.push(u8::from(s.variational));
            put_f64s(&mut out, &[s.kl_weight]);
            let layers = a
                .encoder
                .layers
                .iter()
                .chain(a.logvar_head.iter())
                .chain(a.decoder.layers.iter());
            for l in layers {
                put_f64s(&mut out, &l.weights);
                put_f64s(&mut out, &l.bias);
            }
            match a.final_losses {
                Some(l) => {
                    out.push(1);
                    put_f64s(&mut out, &[l.mse, l.kl]);
                }
                None => out.push(0),
            }
        }
    }
    Ok(out)
}

fn read_layers(r: &mut Reader<'_>, stack: &mut [DenseLayer]) -> Result<()> {
    for l in stack {
        l.weights = r.f64s(l.weights.len())?;
        l.bias = r.f64s(l.bias.len())?;
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<ManifoldModel> {
    let mut r = Reader::new(bytes, "manifold");
    let magic = r.magic()?;
    if magic != MANIFOLD_MAGIC {
        return Err(Error::BadMagic {
            expected: MANIFOLD_MAGIC,
            found: magic,
        });
    }
    let model = match r.u8()? {
        0 => {
            let k = r.u32()? as usize;
            let d = r.u32()? as usize;
            let mean = r.f64s(d)?;
            let comps = r.f64s(k.checked_mul(d).ok_or_else(|| Error::Malformed("dims".into()))?)?;
            let ratios = r.f64s(k)?;
            ManifoldModel::Pca(PcaModel {
                mean,
                components: Tensor::matrix(k, d, comps)?,
                explained_variance_ratio: ratios,
            })
        }
        1 => {
            let d_in = r.u32()? as usize;
            let d_latent = r.u32()? as usize;
            let n_hidden = r.u32()? as usize;
            if n_hidden > 64 {
                return Err(Error::Malformed(format!("{n_hidden} hidden layers")));
            }
            let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let hidden_activation = act_from(r.u8()?)?;
            let output_activation = act_from(r.u8()?)?;
            let variational = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Malformed(format!("variational flag {v}"))),
            };
            let kl_weight = r.f64()?;
            let spec = AeSpec {
                d_in,
                d_latent,
                hidden,
                hidden_activation,
                output_activation,
                variational,
                kl_weight,
            };
            let mut model = AeModel::init(&spec, 0)?;
            read_layers(&mut r, &mut model.encoder.layers)?;
            if let Some(h) = model.logvar_head.as_mut() {
                read_layers(&mut r, std::slice::from_mut(h))?;
            }
            read_layers(&mut r, &mut model.decoder.layers)?;
            model.final_losses = match r.u8()? {
                0 => None,
                1 => Some(AeLosses {
                    mse: r.f64()?,
                    kl: r.f64()?,
                }),
                v => return Err(Error::Malformed(format!("loss flag {v}"))),
            };
            model.validate()?;
            ManifoldModel::Ae(model)
        }
        k => return Err(Error::Malformed(format!("manifold kind {k}"))),
    };
    r.finish()?;
    Ok(model)
}

pub fn save(path: &Path, model: &ManifoldModel) -> Result<()> {
    write_file(path, &encode(model)?)
}

pub fn load(path: &Path) -> Result<ManifoldModel> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::fit_pca;

    #[test]
    fn pca_round_trip_is_bit_exact() {
        let pool = Tensor::matrix(6, 3, (0..18).map(|i| ((i * 7) % 5) as f64 / 3.0).collect()).unwrap();
        let m = ManifoldModel::Pca(fit_pca(&pool, 2).unwrap());
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn ae_round_trip_is_bit_exact() {
        let mut spec = AeSpec::new(5, 2);
        spec.hidden = vec![4, 3];
        let mut a = AeModel::init(&spec, 11).unwrap();
        a.final_losses = Some(AeLosses { mse: 0.1, kl: 1.0 / 3.0 });
        let m = ManifoldModel::Ae(a);
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let pool = Tensor::matrix(4, 2, vec![0.0, 1.0, 1.0, 0.0, 2.0, 3.0, 5.0, 1.0]).unwrap();
        let bytes = encode(&ManifoldModel::Pca(fit_pca(&pool, 1).unwrap())).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'9';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(decode(&bad), Err(Error::Malformed(_))));
    }
}

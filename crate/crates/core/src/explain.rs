//! Grad-CAM class-activation maps and 8-bit PGM export.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Default layer: output of the snake-convolution downsampling block.
pub const DEFAULT_LAYER: &str = "down";

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[h, w]`, non-negative, max 1 unless all zero.
    pub values: Tensor,
    pub layer: String,
    pub class: usize,
}

/// `ReLU(Σ_k α_k·A^k)` with `α_k` the spatial mean of `grad^k`, scaled to
/// max 1 (an all-zero map is returned as is). Inputs are `[C, h, w]`.
pub fn cam_from(activation: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let s = activation.shape();
    if s.len() != 3 || grad.shape() != s {
        return Err(Error::shape(format!("cam activation {s:?} vs gradient {:?}", grad.shape())));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut cam = vec![0.0; hw];
    for k in 0..c {
        let gk = &grad.data()[k * hw..(k + 1) * hw];
        let alpha = gk.iter().sum::<f64>() / hw as f64;
        for (o, a) in cam.iter_mut().zip(&activation.data()[k * hw..(k + 1) * hw]) {
            *o += alpha * a;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in cam.iter_mut() {
            *v /= max;
        }
    }
    Tensor::new(&[s[1], s[2]], cam)
}

/// Grad-CAM for any differentiable pipeline: `build` receives a fresh
/// graph (and `store`) and returns the `[1, C, h, w]` activation of
/// interest together with the `[1, classes]` logits computed from it.
pub fn grad_cam_with<F>(store: &ParamStore, build: F, class: usize) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, &'g ParamStore) -> Result<(Var<'g>, Var<'g>)>,
{
    let g = Graph::new();
    let (act, logits) = build(&g, store)?;
    let classes = logits.shape()[1];
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, classes });
    }
    let target = logits.narrow(1, class, 1)?.sum();
    let grads = g.backward(target)?;
    let s = act.shape();
    let a = act.tensor().reshape(&s[1..])?;
    let d = grads.wrt(act).reshape(&s[1..])?;
    cam_from(&a, &d)
}

/// Grad-CAM of `class` at the tapped feature map `layer` (a block name such
/// as `down` or `stage3.0`) for one `[3,H,W]` or `[1,3,H,W]` image.
pub fn grad_cam(model: &Model, image: &Tensor, class: usize, layer: &str) -> Result<Heatmap> {
    let x = match image.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            image.reshape(&s)?
        }
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(Error::shape(format!("grad_cam takes one image, got {:?}", image.shape()))),
    };
    let values = grad_cam_with(
        &model.store,
        |g, store| {
            let cx = Ctx::new(g, store, Mode::Eval).frozen().capturing();
            // a gradient leaf at the input keeps every activation on the tape
            let logits = model.forward(&cx, g.param(x.clone()))?;
            let act = cx.tapped(layer).filter(|v| v.shape().len() == 4);
            let act = act.ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
            Ok((act, logits))
        },
        class,
    )?;
    Ok(Heatmap { values, layer: layer.to_string(), class })
}

/// Names accepted by [`grad_cam`] for this model.
pub fn cam_layers(model: &Model) -> Vec<String> {
    model.blocks.iter().map(|b| b.name().to_string()).collect()
}

/// `round(255·v)` with halves rounded up, clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(values: &Tensor, path: &Path) -> Result<()> {
    let s = values.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("PGM needs [h, w], got {s:?}")));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(values.data().iter().map(|&v| quantize(v)));
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Reads a P5 PGM with maxval 255 as values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let bad = |m: &str| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string()));
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated PGM header"));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_string));
    }
    if header[0] != "P5" || header[3] != "255" {
        return Err(bad("not an 8-bit P5 PGM"));
    }
    let w: usize = header[1].parse().map_err(|_| bad("bad PGM width"))?;
    let h: usize = header[2].parse().map_err(|_| bad("bad PGM height"))?;
    let mut data = vec![0u8; w * h];
    r.read_exact(&mut data)?;
    Tensor::new(&[h, w], data.iter().map(|&b| b as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        write_pgm(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 64]);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let back = read_pgm(&path).unwrap();
        write_pgm(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        let bad = dir.path().join("missing").join("m.pgm");
        assert!(matches!(write_pgm(&t, &bad), Err(Error::Io(_))));
    }

    #[test]
    fn single_channel_logit_gives_its_positive_part() {
        let a = Tensor::from_fn(&[1, 2, 3, 3], |i| ((i * 37) % 11) as f64 - 5.0);
        let cam = grad_cam_with(
            &ParamStore::new(),
            |g, _| {
                let x = g.param(a.clone());
                let ch1 = x.narrow(1, 1, 1)?.mean().reshape(&[1, 1])?;
                let ch0 = x.narrow(1, 0, 1)?.mean().reshape(&[1, 1])?;
                Ok((x, Var::concat(&[ch0, ch1], 1)?))
            },
            1,
        )
        .unwrap();
        let ch: Vec<f64> = a.data()[9..].iter().map(|v| v.max(0.0)).collect();
        let max = ch.iter().cloned().fold(0.0, f64::max);
        for (c, v) in cam.data().iter().zip(&ch) {
            assert!((c - v / max).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_field_is_all_zero() {
        let a = Tensor::full(&[1, 3, 3], 2.0);
        let g = Tensor::full(&[1, 3, 3], -1.0);
        assert!(cam_from(&a, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_out_of_range() {
        let r = grad_cam_with(&ParamStore::new(), |g, _| {
            let x = g.param(Tensor::ones(&[1, 1, 2, 2]));
            Ok((x, x.mean().reshape(&[1, 1])?))
        }, 1);
        assert!(matches!(r, Err(Error::ClassOutOfRange { class: 1, classes: 1 })));
    }
}

//! Network parameter files: a one-line JSON header followed by a flat
//! little-endian f32 stream.
//!
//! Layout:
//!
//! ```text
//! {"format":"wombet-params","version":1,"meta":{...},"sections":[...]}\n
//! <f32 little-endian values, all sections concatenated>
//! ```
//!
//! The header's `sections` array describes one network per entry: a name plus
//! per-layer records `{"in":I,"out":O,"layer_norm":B,"activation":"relu"}`.
//! Values follow [`Mlp::flatten`] order within each section (per layer:
//! weights row-major, biases, then layer-norm gain and shift when present),
//! sections in header order. `meta` carries caller-defined JSON (for example
//! dynamics-model normalization statistics); it round-trips untouched.
//!
//! Parameters are trained in f64 and stored in f32; loading widens back to
//! f64, so save → load is exact for the stored values but lossy relative to
//! the in-memory f64 state.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, LayerNorm, Mlp};

const FORMAT_NAME: &str = "wombet-params";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    sections: Vec<SectionHeader>,
}

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    #[serde(rename = "in")]
    in_dim: usize,
    out: usize,
    layer_norm: bool,
    activation: Activation,
}

fn section_header(name: &str, net: &Mlp) -> SectionHeader {
    SectionHeader {
        name: name.to_string(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerHeader {
                in_dim: l.in_dim(),
                out: l.out_dim(),
                layer_norm: l.norm.is_some(),
                activation: l.act,
            })
            .collect(),
    }
}

/// Write named networks plus free-form metadata to `w`.
pub fn save<W: Write>(w: &mut W, sections: &[(&str, &Mlp)], meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        meta: meta.clone(),
        sections: sections.iter().map(|(n, net)| section_header(n, net)).collect(),
    };
    let mut line = serde_json::to_vec(&header)
        .map_err(|e| Error::contract(format!("header serialization failed: {e}")))?;
    line.push(b'\n');
    w.write_all(&line)?;
    let mut buf = Vec::new();
    for (_, net) in sections {
        for v in net.flatten() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Convenience wrapper writing to a filesystem path.
pub fn save_to_path(
    path: &std::path::Path,
    sections: &[(&str, &Mlp)],
    meta: &serde_json::Value,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    save(&mut f, sections, meta)?;
    f.sync_all()?;
    Ok(())
}

/// Result of [`load`]: named networks in file order plus the metadata blob.
#[derive(Debug)]
pub struct Checkpoint {
    pub sections: Vec<(String, Mlp)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Look up a section by name.
    pub fn section(&self, name: &str) -> Result<&Mlp> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::contract(format!("checkpoint has no section named {name:?}")))
    }
}

fn zeroed_mlp(sh: &SectionHeader) -> Result<Mlp> {
    let layers = sh
        .layers
        .iter()
        .map(|lh| Layer {
            w: ndarray::Array2::zeros((lh.out, lh.in_dim)),
            b: ndarray::Array1::zeros(lh.out),
            norm: if lh.layer_norm { Some(LayerNorm::identity(lh.out)) } else { None },
            act: lh.activation,
        })
        .collect();
    Mlp::from_layers(layers)
}

/// Read a parameter file produced by [`save`].
///
/// Failure modes map to the crate error taxonomy: a malformed or missing
/// header is a [`Error::Parse`] at the offending byte offset, a future
/// `version` is [`Error::UnsupportedVersion`], and a value stream shorter
/// than the header promises is a parse error at the truncation point.
pub fn load<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
        offset: bytes.len(),
        msg: "header line never terminated".to_string(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
        offset: e.column().saturating_sub(1),
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT_NAME {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("unrecognized format tag {:?}", header.format),
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            expected: FORMAT_VERSION.to_string(),
            found: header.version.to_string(),
        });
    }

    let mut sections = Vec::with_capacity(header.sections.len());
    let mut offset = nl + 1;
    for sh in &header.sections {
        let mut net = zeroed_mlp(sh)?;
        let count = net.param_count();
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            let end = offset + 4;
            if end > bytes.len() {
                return Err(Error::Parse {
                    offset: bytes.len(),
                    msg: format!(
                        "value stream truncated: section {:?} needs {} bytes past offset {}",
                        sh.name,
                        end - bytes.len(),
                        bytes.len()
                    ),
                });
            }
            let raw: [u8; 4] = bytes[offset..end].try_into().unwrap();
            flat.push(f32::from_le_bytes(raw) as f64);
            offset = end;
        }
        net.assign_flat(&flat)?;
        sections.push((sh.name.clone(), net));
    }
    if offset != bytes.len() {
        return Err(Error::Parse {
            offset,
            msg: format!("{} trailing bytes after value stream", bytes.len() - offset),
        });
    }
    Ok(Checkpoint { sections, meta: header.meta })
}

/// Convenience wrapper reading from a filesystem path.
pub fn load_from_path(path: &std::path::Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    load(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use serde_json::json;

    fn sample_net(seed: u64, layer_norm: bool) -> Mlp {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Mlp::new(&[3, 8, 2], Activation::Relu, layer_norm, &mut rng).unwrap()
    }

    fn quantized(net: &Mlp) -> Vec<f64> {
        net.flatten().iter().map(|&v| v as f32 as f64).collect()
    }

    #[test]
    fn round_trip_preserves_f32_quantized_params_and_meta() {
        let a = sample_net(1, true);
        let b = sample_net(2, false);
        let meta = json!({"state_dim": 2, "note": "x"});
        let mut buf = Vec::new();
        save(&mut buf, &[("actor", &a), ("critic", &b)], &meta).unwrap();

        let ck = load(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.sections.len(), 2);
        assert_eq!(ck.sections[0].0, "actor");
        assert_eq!(ck.section("actor").unwrap().flatten(), quantized(&a));
        assert_eq!(ck.section("critic").unwrap().flatten(), quantized(&b));
        assert!(ck.section("missing").is_err());
        // Saving the loaded nets again is byte-stable (f32 quantization is
        // idempotent).
        let mut buf2 = Vec::new();
        save(
            &mut buf2,
            &[
                ("actor", ck.section("actor").unwrap()),
                ("critic", ck.section("critic").unwrap()),
            ],
            &meta,
        )
        .unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn structure_survives_round_trip() {
        let a = sample_net(3, true);
        let mut buf = Vec::new();
        save(&mut buf, &[("net", &a)], &json!(null)).unwrap();
        let ck = load(&mut buf.as_slice()).unwrap();
        let loaded = ck.section("net").unwrap();
        assert_eq!(loaded.layers().len(), a.layers().len());
        for (la, lb) in a.layers().iter().zip(loaded.layers()) {
            assert_eq!(la.in_dim(), lb.in_dim());
            assert_eq!(la.out_dim(), lb.out_dim());
            assert_eq!(la.norm.is_some(), lb.norm.is_some());
            assert_eq!(la.act, lb.act);
        }
    }

    #[test]
    fn truncated_stream_is_a_parse_error_at_the_cut() {
        let a = sample_net(4, false);
        let mut buf = Vec::new();
        save(&mut buf, &[("net", &a)], &json!({})).unwrap();
        let cut = buf.len() - 5;
        match load(&mut buf[..cut].to_vec().as_slice()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_newline_and_garbage_header_are_parse_errors() {
        assert!(matches!(
            load(&mut &b"no newline here"[..]),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            load(&mut &b"{not json}\n"[..]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected_as_unsupported() {
        let a = sample_net(5, false);
        let mut buf = Vec::new();
        save(&mut buf, &[("net", &a)], &json!({})).unwrap();
        // Rewrite the version field; parameter bytes follow the first newline
        // so only the header line is patched.
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let patched_header = String::from_utf8(buf[..nl].to_vec())
            .unwrap()
            .replace("\"version\":1", "\"version\":2");
        let mut patched = patched_header.into_bytes();
        patched.push(b'\n');
        patched.extend_from_slice(&buf[nl + 1..]);
        match load(&mut patched.as_slice()) {
            Err(Error::UnsupportedVersion { expected, found }) => {
                assert_eq!(expected, "1");
                assert_eq!(found, "2");
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let a = sample_net(6, false);
        let mut buf = Vec::new();
        save(&mut buf, &[("net", &a)], &json!({})).unwrap();
        buf.extend_from_slice(&[0u8; 3]);
        assert!(matches!(load(&mut buf.as_slice()), Err(Error::Parse { .. })));
    }
}

//! Binary little-endian PLY reader/writer using the 3D-GS community
//! vertex layout: x y z, f_dc_0..2, optional f_rest_*, opacity stored as
//! a pre-sigmoid logit, scale_0..2 stored as log-scales, rot_0..3 as an
//! unnormalized (w, x, y, z) quaternion. Optional per-vertex feature
//! columns named f_0..f_{C-1} populate a `FeatureTable`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use super::{FeatureTable, GaussianPrimitive, GaussianScene};
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct Header {
    count: usize,
    properties: Vec<String>,
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("unexpected end of header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Parse(format!("unsupported PLY format '{fmt}'")));
                }
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| {
                    Error::Parse(format!("bad vertex count '{n}'"))
                })?);
                in_vertex_element = true;
            }
            ["element", name, _] => {
                return Err(Error::Parse(format!("unsupported element '{name}'")));
            }
            ["property", ty, name] => {
                if !in_vertex_element {
                    return Err(Error::Parse("property before vertex element".into()));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(Error::Parse(format!(
                        "unsupported property type '{ty}' for '{name}'"
                    )));
                }
                properties.push((*name).to_string());
            }
            ["end_header"] => break,
            _ => return Err(Error::Parse(format!("unrecognized header line '{}'", line.trim()))),
        }
    }
    let count = count.ok_or_else(|| Error::Parse("missing vertex element".into()))?;
    Ok(Header { count, properties })
}

/// Load a Gaussian scene (and an optional feature table) from PLY bytes.
///
/// Opacity and scale are mapped out of their stored logit/log domains,
/// quaternions are renormalized, and file order is preserved.
pub fn load_ply<R: BufRead>(mut reader: R) -> Result<(GaussianScene, Option<FeatureTable>)> {
    let header = parse_header(&mut reader)?;
    let index: HashMap<&str, usize> = header
        .properties
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();

    let need = |name: &str| -> Result<usize> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing required vertex property '{name}'")))
    };

    let ix = need("x")?;
    let iy = need("y")?;
    let iz = need("z")?;
    let idc: [usize; 3] = [need("f_dc_0")?, need("f_dc_1")?, need("f_dc_2")?];
    let iop = need("opacity")?;
    let iscale: [usize; 3] = [need("scale_0")?, need("scale_1")?, need("scale_2")?];
    let irot: [usize; 4] = [need("rot_0")?, need("rot_1")?, need("rot_2")?, need("rot_3")?];

    let rest_count = (0..)
        .take_while(|i| index.contains_key(format!("f_rest_{i}").as_str()))
        .count();
    let degree = match rest_count {
        0 => 0,
        9 => 1,
        24 => 2,
        45 => 3,
        n => {
            return Err(Error::Schema(format!(
                "f_rest_* count {n} does not match any SH degree in 0..=3"
            )))
        }
    };
    let irest: Vec<usize> = (0..rest_count)
        .map(|i| need(&format!("f_rest_{i}")))
        .collect::<Result<_>>()?;

    let feat_count = (0..)
        .take_while(|i| index.contains_key(format!("f_{i}").as_str()))
        .count();
    let ifeat: Vec<usize> = (0..feat_count)
        .map(|i| need(&format!("f_{i}")))
        .collect::<Result<_>>()?;

    let stride = header.properties.len();
    let mut buf = vec![0u8; stride * 4];
    let mut gaussians = Vec::with_capacity(header.count);
    let mut features = Vec::with_capacity(header.count * feat_count);

    for elem in 0..header.count {
        reader.read_exact(&mut buf).map_err(|_| {
            Error::Parse(format!("truncated vertex data at element {elem}"))
        })?;
        let get = |p: usize| -> f64 {
            f32::from_le_bytes(buf[p * 4..p * 4 + 4].try_into().expect("4 bytes")) as f64
        };
        for p in 0..stride {
            if !get(p).is_finite() {
                return Err(Error::Parse(format!(
                    "non-finite value in property '{}' at element {elem}",
                    header.properties[p]
                )));
            }
        }
        let coeffs_per_channel = (degree + 1) * (degree + 1);
        let mut sh = vec![[0.0f64; 3]; coeffs_per_channel];
        for ch in 0..3 {
            sh[0][ch] = get(idc[ch]);
        }
        // f_rest is channel-major: all higher coefficients for R, then G, then B.
        let rest_per_channel = coeffs_per_channel - 1;
        for ch in 0..3 {
            for c in 0..rest_per_channel {
                sh[c + 1][ch] = get(irest[ch * rest_per_channel + c]);
            }
        }
        let g = GaussianPrimitive::new(
            Vector3::new(get(ix), get(iy), get(iz)),
            Vector3::new(
                get(iscale[0]).exp(),
                get(iscale[1]).exp(),
                get(iscale[2]).exp(),
            ),
            [get(irot[0]), get(irot[1]), get(irot[2]), get(irot[3])],
            sigmoid(get(iop)),
            sh,
        )
        .map_err(|e| Error::Parse(format!("element {elem}: {e}")))?;
        gaussians.push(g);
        for &p in &ifeat {
            features.push(get(p));
        }
    }

    let table = if feat_count > 0 {
        Some(FeatureTable::new(header.count, feat_count, features)?)
    } else {
        None
    };
    Ok((GaussianScene::new(gaussians), table))
}

/// Write a scene (and optional feature table) in the layout `load_ply`
/// reads. Loading the output reproduces the scene; for scenes that came
/// from this writer the round trip is bit-exact.
pub fn write_ply<W: Write>(
    writer: &mut W,
    scene: &GaussianScene,
    features: Option<&FeatureTable>,
) -> Result<()> {
    if let Some(t) = features {
        if t.rows != scene.len() {
            return Err(Error::Contract(format!(
                "feature rows {} do not match scene count {}",
                t.rows,
                scene.len()
            )));
        }
    }
    let degree = scene.gaussians.first().map_or(0, |g| g.sh_degree());
    if scene.gaussians.iter().any(|g| g.sh_degree() != degree) {
        return Err(Error::Contract("mixed SH degrees in one scene".into()));
    }
    let rest_per_channel = (degree + 1) * (degree + 1) - 1;

    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for i in 0..rest_per_channel * 3 {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    header.push_str("property float opacity\n");
    for i in 0..3 {
        header.push_str(&format!("property float scale_{i}\n"));
    }
    for i in 0..4 {
        header.push_str(&format!("property float rot_{i}\n"));
    }
    if let Some(t) = features {
        for i in 0..t.channels {
            header.push_str(&format!("property float f_{i}\n"));
        }
    }
    header.push_str("end_header\n");
    writer.write_all(header.as_bytes())?;

    let put = |w: &mut W, v: f64| -> Result<()> {
        w.write_all(&(v as f32).to_le_bytes())?;
        Ok(())
    };
    for (i, g) in scene.gaussians.iter().enumerate() {
        put(writer, g.center.x)?;
        put(writer, g.center.y)?;
        put(writer, g.center.z)?;
        for ch in 0..3 {
            put(writer, g.sh_coeffs[0][ch])?;
        }
        for ch in 0..3 {
            for c in 0..rest_per_channel {
                put(writer, g.sh_coeffs[c + 1][ch])?;
            }
        }
        put(writer, logit(g.opacity))?;
        for a in 0..3 {
            put(writer, g.scale[a].ln())?;
        }
        let q = g.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            put(writer, v)?;
        }
        if let Some(t) = features {
            for &v in t.row(i) {
                put(writer, v)?;
            }
        }
    }
    Ok(())
}

//! ASCII PLY point files for Gaussian sets.
//!
//! Vertex properties: `x y z qw qx qy qz s0 s1 s2 r g b opacity_logit
//! group_id`, then `z0 … z{d-1}` when latents are present. `s*` are log
//! standard deviations, `r g b` the activated color, `group_id` is `-1` for
//! ungrouped Gaussians.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{logit, Gaussian, GaussianSet};

const BASE_PROPS: [&str; 14] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "s0", "s1", "s2", "r", "g", "b", "opacity_logit",
];

pub fn write_ply(path: &Path, set: &GaussianSet) -> Result<()> {
    let latent = set.gaussians.first().map_or(0, |g| g.latent.len());
    if set.gaussians.iter().any(|g| g.latent.len() != latent) {
        return Err(Error::invalid("write_ply: latent sizes differ"));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment supergauss gaussians\n");
    let bg = set.background;
    let _ = writeln!(s, "comment background {} {} {}", bg[0], bg[1], bg[2]);
    let _ = writeln!(s, "element vertex {}", set.len());
    for p in BASE_PROPS {
        let _ = writeln!(s, "property double {p}");
    }
    s.push_str("property int group_id\n");
    for k in 0..latent {
        let _ = writeln!(s, "property double z{k}");
    }
    s.push_str("end_header\n");
    for g in &set.gaussians {
        let c = g.color();
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            c.x,
            c.y,
            c.z,
            g.opacity_logit,
        ];
        for v in vals {
            let _ = write!(s, "{v:?} ");
        }
        let _ = write!(s, "{}", g.group_id.map_or(-1, |k| k as i64));
        for z in &g.latent {
            let _ = write!(s, " {z:?}");
        }
        s.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<GaussianSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "missing 'ply' magic"));
    }
    let mut props: Vec<String> = Vec::new();
    let mut count = None;
    let mut background = [0.0; 3];
    let mut in_vertex = false;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, "header has no end_header"))?
            .trim();
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::format(path, format!("unsupported PLY format '{fmt}'")));
            }
            ["comment", "background", r, g, b] => {
                for (slot, v) in background.iter_mut().zip([r, g, b]) {
                    *slot = v
                        .parse()
                        .map_err(|_| Error::format(path, "bad background comment"))?;
                }
            }
            ["element", "vertex", n] => {
                in_vertex = true;
                count = Some(n.parse::<usize>().map_err(|_| Error::format(path, "bad vertex count"))?);
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let mut base = [0usize; 14];
    for (slot, name) in base.iter_mut().zip(BASE_PROPS) {
        *slot = col(name).ok_or_else(|| Error::format(path, format!("missing property '{name}'")))?;
    }
    let gid = col("group_id");
    let latent: Vec<usize> = (0..).map_while(|k| col(&format!("z{k}"))).collect();

    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("expected {count} vertices, found {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("vertex {i}: unparsable value")))?;
        if vals.len() != props.len() {
            return Err(Error::format(
                path,
                format!("vertex {i}: {} values for {} properties", vals.len(), props.len()),
            ));
        }
        let v = |k: usize| vals[base[k]];
        let group_id = gid.and_then(|c| (vals[c] >= 0.0).then_some(vals[c] as usize));
        gaussians.push(Gaussian {
            position: Vector3::new(v(0), v(1), v(2)),
            rotation: [v(3), v(4), v(5), v(6)],
            log_scale: Vector3::new(v(7), v(8), v(9)),
            color_logit: Vector3::new(logit(v(10)), logit(v(11)), logit(v(12))),
            opacity_logit: v(13),
            latent: latent.iter().map(|&c| vals[c]).collect(),
            group_id,
        });
    }
    let set = GaussianSet::new(gaussians, background);
    set.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(set)
}

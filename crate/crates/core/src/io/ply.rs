//! PLY scenes (one vertex per Gaussian) and colored point clouds.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use ply_rs_bw::parser::Parser;
use ply_rs_bw::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType,
    ScalarType,
};
use ply_rs_bw::writer::Writer;

use crate::error::Result;
use crate::pointinit::PointCloud;
use crate::scene::Gaussian3D;

const SCENE_FIELDS: [&str; 14] = [
    "x", "y", "z", "r", "g", "b", "opacity", "scale_x", "scale_y", "scale_z", "rot_w", "rot_x",
    "rot_y", "rot_z",
];

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn vertex_def(fields: &[(&str, ScalarType)]) -> ElementDef {
    let mut el = ElementDef::new("vertex".to_string());
    for (name, ty) in fields {
        el.properties
            .add(PropertyDef::new(name.to_string(), PropertyType::Scalar(ty.clone())));
    }
    el
}

fn write(path: &Path, mut ply: Ply<DefaultElement>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    Writer::new().write_ply(&mut out, &mut ply)?;
    Ok(())
}

fn read(path: &Path) -> Result<Ply<DefaultElement>> {
    let mut input = BufReader::new(File::open(path)?);
    Parser::<DefaultElement>::new()
        .read_ply(&mut input)
        .map_err(|e| super::format_error(path, e.to_string()))
}

fn field(path: &Path, el: &DefaultElement, name: &str) -> Result<f64> {
    el.get(name)
        .and_then(scalar)
        .ok_or_else(|| super::format_error(path, format!("vertex is missing scalar property {name:?}")))
}

/// Writes Gaussians as binary little-endian PLY with float properties
/// `x y z r g b opacity scale_x scale_y scale_z rot_w rot_x rot_y rot_z`.
pub fn write_scene_ply(path: impl AsRef<Path>, gaussians: &[Gaussian3D], background: &Vector3<f64>) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    ply.header.comments.push(format!(
        "background {} {} {}",
        background.x, background.y, background.z
    ));
    let fields: Vec<_> = SCENE_FIELDS.iter().map(|n| (*n, ScalarType::Float)).collect();
    ply.header.elements.add(vertex_def(&fields));
    let rows = gaussians
        .iter()
        .map(|g| {
            let q = &g.rotation;
            let values = [
                g.position.x, g.position.y, g.position.z, g.color.x, g.color.y, g.color.z,
                g.opacity, g.scale.x, g.scale.y, g.scale.z, q.w, q.i, q.j, q.k,
            ];
            let mut el = DefaultElement::new();
            for (name, v) in SCENE_FIELDS.iter().zip(values) {
                el.insert(name.to_string(), Property::Float(v as f32));
            }
            el
        })
        .collect();
    ply.payload.insert("vertex".to_string(), rows);
    write(path.as_ref(), ply)
}

/// Reads a scene PLY; quaternions are renormalized after the float round trip.
pub fn read_scene_ply(path: impl AsRef<Path>) -> Result<(Vec<Gaussian3D>, Vector3<f64>)> {
    let path = path.as_ref();
    let ply = read(path)?;
    let mut background = Vector3::zeros();
    for c in &ply.header.comments {
        if let Some(rest) = c.strip_prefix("background ") {
            let v: Vec<f64> = rest.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if v.len() == 3 {
                background = Vector3::new(v[0], v[1], v[2]);
            }
        }
    }
    let mut out = Vec::new();
    for el in ply.payload.get("vertex").map(Vec::as_slice).unwrap_or_default() {
        let mut v = [0.0; 14];
        for (slot, name) in v.iter_mut().zip(SCENE_FIELDS) {
            *slot = field(path, el, name)?;
        }
        let q = Quaternion::new(v[10], v[11], v[12], v[13]);
        let g = Gaussian3D {
            position: Vector3::new(v[0], v[1], v[2]),
            color: Vector3::new(v[3], v[4], v[5]).map(|c| c.clamp(0.0, 1.0)),
            opacity: v[6].max(0.0),
            scale: Vector3::new(v[7], v[8], v[9]),
            rotation: q / q.norm(),
        };
        g.validate()
            .map_err(|e| super::format_error(path, format!("vertex {}: {e}", out.len())))?;
        out.push(g);
    }
    Ok((out, background))
}

/// Writes a point cloud as binary PLY with float `x y z` and uchar
/// `red green blue`.
pub fn write_point_cloud_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    ply.header.elements.add(vertex_def(&[
        ("x", ScalarType::Float),
        ("y", ScalarType::Float),
        ("z", ScalarType::Float),
        ("red", ScalarType::UChar),
        ("green", ScalarType::UChar),
        ("blue", ScalarType::UChar),
    ]));
    let to_u8 = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    let rows = cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .map(|(p, c)| {
            let mut el = DefaultElement::new();
            el.insert("x".into(), Property::Float(p.x as f32));
            el.insert("y".into(), Property::Float(p.y as f32));
            el.insert("z".into(), Property::Float(p.z as f32));
            el.insert("red".into(), Property::UChar(to_u8(c.x)));
            el.insert("green".into(), Property::UChar(to_u8(c.y)));
            el.insert("blue".into(), Property::UChar(to_u8(c.z)));
            el
        })
        .collect();
    ply.payload.insert("vertex".to_string(), rows);
    write(path.as_ref(), ply)
}

pub fn read_point_cloud_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let ply = read(path)?;
    let mut cloud = PointCloud::default();
    for el in ply.payload.get("vertex").map(Vec::as_slice).unwrap_or_default() {
        cloud.positions.push(Vector3::new(
            field(path, el, "x")?,
            field(path, el, "y")?,
            field(path, el, "z")?,
        ));
        let color = |name: &str| -> Result<f64> {
            let raw = field(path, el, name)?;
            Ok(match el.get(name) {
                Some(Property::Float(_)) | Some(Property::Double(_)) => raw,
                _ => raw / 255.0,
            })
        };
        cloud
            .colors
            .push(Vector3::new(color("red")?, color("green")?, color("blue")?));
    }
    Ok(cloud)
}

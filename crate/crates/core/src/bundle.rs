//! The TrackBundle on-disk container.
//!
//! Layout: magic `TRKB`, version u16 LE, header-length u32 LE, header JSON,
//! then contiguous little-endian f32 blocks in the order the header declares
//! them. Track bundles carry `positions [N,T,2]`, `visibility [N,T]`
//! (0.0/1.0) and optionally `depth`/`ratio [N,T]`; depth-map stacks reuse the
//! container with a single `depthmap [T,H,W]` channel.

use crate::geometry::CameraModel;
use crate::synth::{DepthTrack, Role, TrackSet};
use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"TRKB";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected TRKB, got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("header json: {0}")]
    HeaderJson(#[from] serde_json::Error),
    #[error("channel {channel}: declared {declared} values but payload holds {actual}")]
    SizeMismatch { channel: String, declared: usize, actual: usize },
    #[error("{0} bytes of trailing payload beyond declared channels")]
    TrailingBytes(usize),
    #[error("missing channel \"{0}\"")]
    MissingChannel(String),
    #[error("channel {channel} has shape {shape:?}, expected {expected}")]
    BadShape { channel: String, shape: Vec<usize>, expected: String },
    #[error("role flags count {0} does not match n = {1}")]
    RoleCountMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ChannelDecl {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub n: usize,
    pub t: usize,
    pub camera: CameraModel,
    pub channels: Vec<ChannelDecl>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roles: Option<Vec<Role>>,
}

/// An in-memory bundle: header plus one f32 block per declared channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub header: BundleHeader,
    pub data: Vec<Vec<f32>>,
}

impl Bundle {
    pub fn channel(&self, name: &str) -> Result<&[f32], BundleError> {
        self.header
            .channels
            .iter()
            .position(|c| c.name == name)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| BundleError::MissingChannel(name.to_string()))
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.header.channels.iter().any(|c| c.name == name)
    }
}

// ==== READ / WRITE ====

pub fn write_bundle(path: &Path, bundle: &Bundle) -> Result<(), BundleError> {
    for (decl, block) in bundle.header.channels.iter().zip(&bundle.data) {
        if decl.len() != block.len() {
            return Err(BundleError::SizeMismatch {
                channel: decl.name.clone(),
                declared: decl.len(),
                actual: block.len(),
            });
        }
    }
    if let Some(roles) = &bundle.header.roles {
        if roles.len() != bundle.header.n {
            return Err(BundleError::RoleCountMismatch(roles.len(), bundle.header.n));
        }
    }
    let header = serde_json::to_vec(&bundle.header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(&header)?;
    let mut buf = Vec::new();
    for block in &bundle.data {
        buf.resize(block.len() * 4, 0);
        LittleEndian::write_f32_into(block, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Bundle, BundleError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: BundleHeader = serde_json::from_slice(&header_bytes)?;

    let mut data = Vec::with_capacity(header.channels.len());
    for decl in &header.channels {
        let mut bytes = vec![0u8; decl.len() * 4];
        r.read_exact(&mut bytes).map_err(|_| BundleError::SizeMismatch {
            channel: decl.name.clone(),
            declared: decl.len(),
            actual: 0,
        })?;
        let mut block = vec![0f32; decl.len()];
        LittleEndian::read_f32_into(&bytes, &mut block);
        data.push(block);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(BundleError::TrailingBytes(rest.len()));
    }
    Ok(Bundle { header, data })
}

// ==== TRACK AND DEPTH-MAP VIEWS ====

/// Assembles a bundle from tracks plus optional depth and ratio channels.
pub fn tracks_to_bundle(
    tracks: &TrackSet,
    depths: Option<&DepthTrack>,
    ratios: Option<&[f32]>,
) -> Bundle {
    let (n, t) = (tracks.n, tracks.t_len);
    let mut channels = vec![
        ChannelDecl { name: "positions".into(), shape: vec![n, t, 2] },
        ChannelDecl { name: "visibility".into(), shape: vec![n, t] },
    ];
    let mut data = vec![
        tracks.positions.clone(),
        tracks.visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    ];
    if let Some(d) = depths {
        channels.push(ChannelDecl { name: "depth".into(), shape: vec![n, t] });
        data.push(d.depths.iter().map(|&x| x as f32).collect());
    }
    if let Some(r) = ratios {
        assert_eq!(r.len(), n * t, "ratio channel must be [N,T]");
        channels.push(ChannelDecl { name: "ratio".into(), shape: vec![n, t] });
        data.push(r.to_vec());
    }
    Bundle {
        header: BundleHeader {
            n,
            t,
            camera: tracks.camera,
            channels,
            roles: Some(tracks.roles.clone()),
        },
        data,
    }
}

/// Recovers tracks (and depth/ratio channels when present) from a bundle.
pub fn tracks_from_bundle(
    bundle: &Bundle,
) -> Result<(TrackSet, Option<DepthTrack>, Option<Vec<f32>>), BundleError> {
    let (n, t) = (bundle.header.n, bundle.header.t);
    let expect = |name: &str, want: usize| -> Result<&[f32], BundleError> {
        let block = bundle.channel(name)?;
        if block.len() != want {
            return Err(BundleError::SizeMismatch {
                channel: name.to_string(),
                declared: want,
                actual: block.len(),
            });
        }
        Ok(block)
    };
    let positions = expect("positions", n * t * 2)?.to_vec();
    let visibility: Vec<bool> = expect("visibility", n * t)?.iter().map(|&v| v != 0.0).collect();
    let roles = match &bundle.header.roles {
        Some(r) if r.len() == n => r.clone(),
        Some(r) => return Err(BundleError::RoleCountMismatch(r.len(), n)),
        None => vec![Role::Query; n],
    };
    let tracks = TrackSet { n, t_len: t, positions, visibility, camera: bundle.header.camera, roles };
    let depths = if bundle.has_channel("depth") {
        Some(DepthTrack {
            n,
            t_len: t,
            depths: expect("depth", n * t)?.iter().map(|&x| x as f64).collect(),
        })
    } else {
        None
    };
    let ratios = if bundle.has_channel("ratio") {
        Some(expect("ratio", n * t)?.to_vec())
    } else {
        None
    };
    Ok((tracks, depths, ratios))
}

/// Per-frame dense depth maps, `data[(t * h + y) * w + x]` in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMapStack {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub camera: CameraModel,
    pub data: Vec<f32>,
}

impl DepthMapStack {
    pub fn to_bundle(&self) -> Bundle {
        Bundle {
            header: BundleHeader {
                n: 0,
                t: self.t,
                camera: self.camera,
                channels: vec![ChannelDecl {
                    name: "depthmap".into(),
                    shape: vec![self.t, self.h, self.w],
                }],
                roles: None,
            },
            data: vec![self.data.clone()],
        }
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self, BundleError> {
        let decl = bundle
            .header
            .channels
            .iter()
            .find(|c| c.name == "depthmap")
            .ok_or_else(|| BundleError::MissingChannel("depthmap".into()))?;
        if decl.shape.len() != 3 {
            return Err(BundleError::BadShape {
                channel: "depthmap".into(),
                shape: decl.shape.clone(),
                expected: "[T,H,W]".into(),
            });
        }
        Ok(DepthMapStack {
            t: decl.shape[0],
            h: decl.shape[1],
            w: decl.shape[2],
            camera: bundle.header.camera,
            data: bundle.channel("depthmap")?.to_vec(),
        })
    }
}

// ==== TESTS ====

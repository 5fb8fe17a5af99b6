//! Checkpoint bundle: map snapshot, decoder parameters and the render
//! settings they were trained with, in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::decoder::DecoderParams;
use crate::render::RenderConfig;
use crate::svo::{HybridVoxelMap, MapError};

/// Longest accepted render-settings block, bytes.
const MAX_SETTINGS_LEN: u32 = 1 << 16;

#[derive(Debug, Clone)]
pub struct Model {
    pub map: HybridVoxelMap,
    pub decoder: DecoderParams,
    pub render: RenderConfig,
}

impl Model {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), MapError> {
        if self.decoder.feature_dim() != self.map.feature_dim() {
            return Err(MapError::Snapshot("decoder input width differs from the map feature size".into()));
        }
        self.map.write_snapshot(w)?;
        self.decoder.write(w)?;
        let settings = toml::to_string(&self.render).expect("render config serializes");
        w.write_u32::<LittleEndian>(settings.len() as u32)?;
        w.write_all(settings.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, MapError> {
        let map = HybridVoxelMap::read_snapshot(r)?;
        let decoder = DecoderParams::read(r)?;
        if decoder.feature_dim() != map.feature_dim() {
            return Err(MapError::Snapshot("decoder input width differs from the map feature size".into()));
        }
        let len = r.read_u32::<LittleEndian>()?;
        if len > MAX_SETTINGS_LEN {
            return Err(MapError::Snapshot("render settings block too long".into()));
        }
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| MapError::Snapshot("render settings are not UTF-8".into()))?;
        let render = toml::from_str(&text).map_err(|e| MapError::Snapshot(format!("render settings: {e}")))?;
        Ok(Self { map, decoder, render })
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

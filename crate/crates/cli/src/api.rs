//! JSON bodies of the HTTP service.

use base64::Engine;
use serde::{Deserialize, Serialize};
use stgan::lie::{self, FrameMap, Placement, WarpParams};
use stgan::raster::{ForegroundLayer, Raster};

/// Foreground placement in background pixels: the foreground layer is
/// scaled by `scale` about its center and shifted by `translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementForm {
    pub translation: [f64; 2],
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    /// Base64 PNG with alpha. Resampled to the background size when the
    /// sizes differ.
    pub fg: String,
    /// Base64 PNG, RGB.
    pub bg: String,
    #[serde(default)]
    pub p0: Option<[f64; 8]>,
    #[serde(default)]
    pub placement: Option<PlacementForm>,
    /// Number of stages to run; all when absent.
    #[serde(default)]
    pub stages: Option<usize>,
    /// Include base64 PNG composites for every state.
    #[serde(default)]
    pub previews: bool,
    /// Extra states linearly interpolated between consecutive stages, for
    /// animation.
    #[serde(default)]
    pub interpolation_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpolated {
    /// Fractional stage position of each entry.
    pub t: Vec<f64>,
    pub states: Vec<[f64; 8]>,
    pub homographies: Vec<[f64; 9]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    /// `p_0..p_N` in the canonical frame.
    pub states: Vec<[f64; 8]>,
    /// Row-major 3x3 homographies in background pixel coordinates.
    pub homographies: Vec<[f64; 9]>,
    pub width: usize,
    pub height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previews: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interpolated: Option<Interpolated>,
    pub model_kind: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

/// Why a request could not be served.
#[derive(Debug)]
pub enum RequestError {
    /// Structurally invalid: 400.
    Malformed(String),
    /// An image that does not decode: 422.
    Undecodable(String),
}

pub fn decode_png(field: &str, b64: &str) -> Result<Raster, RequestError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| RequestError::Undecodable(format!("{field}: base64: {e}")))?;
    Raster::decode_png(&bytes).map_err(|e| RequestError::Undecodable(format!("{field}: {e}")))
}

pub fn encode_png(r: &Raster) -> Result<String, stgan::raster::RasterError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(r.encode_png()?))
}

/// Decoded, validated request inputs.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub fg: ForegroundLayer,
    pub bg: Raster,
    pub p0: WarpParams,
}

impl PredictRequest {
    pub fn inputs(&self) -> Result<Inputs, RequestError> {
        let rgba = decode_png("fg", &self.fg)?;
        if rgba.channels != 4 {
            return Err(RequestError::Undecodable(format!("fg has {} channels, expected RGBA", rgba.channels)));
        }
        let bg = decode_png("bg", &self.bg)?;
        let bg = match bg.channels {
            3 => bg,
            4 => Raster::new(bg.height, bg.width, 3, bg.data[..3 * bg.plane_len()].to_vec())
                .map_err(|e| RequestError::Undecodable(e.to_string()))?,
            c => return Err(RequestError::Undecodable(format!("bg has {c} channels, expected RGB"))),
        };
        let mut fg = ForegroundLayer::from_rgba(&rgba).map_err(|e| RequestError::Undecodable(e.to_string()))?;
        if fg.height() != bg.height || fg.width() != bg.width {
            fg = fg.resize(bg.height, bg.width);
        }
        let fm = FrameMap::new(bg.width, bg.height);
        let p0 = match (self.p0, self.placement) {
            (Some(p), None) => {
                let p = WarpParams(p);
                if !p.is_finite() {
                    return Err(RequestError::Malformed("p0 must be finite".into()));
                }
                p
            }
            (None, Some(pl)) => placement_params(&pl, &fm)?,
            _ => return Err(RequestError::Malformed("give exactly one of p0 and placement".into())),
        };
        Ok(Inputs { fg, bg, p0 })
    }
}

/// The canonical-frame warp realizing a placement on a `fm`-sized layer.
pub fn placement_params(pl: &PlacementForm, fm: &FrameMap) -> Result<WarpParams, RequestError> {
    let center = [
        (fm.width as f64 - 1.0) / 2.0 + pl.translation[0],
        (fm.height as f64 - 1.0) / 2.0 + pl.translation[1],
    ];
    lie::placement_to_params(&Placement { center, scale: pl.scale }, fm)
        .map_err(|e| RequestError::Malformed(format!("placement: {e}")))
}

//! Glue between videos on disk and the network: turning videos into fixed
//! length samples, and network outputs into video-level proposals.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{rescale_sequence, sliding_windows, VideoRecord};
use crate::error::{Error, Result};
use crate::labels::{to_grid, LabelSet};
use crate::model::DbgModel;
use crate::postprocess::{dense_candidates, finalize, FusedMaps, GridMapping, Proposal, RetrievalConfig, SoftNmsConfig};
use crate::tensor::{Real, Tensor};
use crate::train::TrainSample;

/// How variable-length videos become length-`L` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum InputMode {
    /// Whole video resampled to `L` rows.
    Rescale { length: usize },
    /// Overlapping windows of `L` rows.
    Window { length: usize, overlap: f64 },
}

impl InputMode {
    pub fn length(&self) -> usize {
        match *self {
            InputMode::Rescale { length } | InputMode::Window { length, .. } => length,
        }
    }

    /// Soft-NMS threshold used when none is given.
    pub fn default_theta(&self) -> f64 {
        match self {
            InputMode::Rescale { .. } => 0.8,
            InputMode::Window { .. } => 0.65,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputMode::Rescale { .. } => "rescale",
            InputMode::Window { .. } => "window",
        }
    }
}

/// Mode names as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Rescale,
    Window,
}

impl FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rescale" => Ok(ModeKind::Rescale),
            "window" => Ok(ModeKind::Window),
            other => Err(Error::Invalid(format!("mode must be rescale or window, got {other:?}"))),
        }
    }
}

/// Length-`L` training samples of one video.
pub fn prepare_samples<T: Real>(video: &VideoRecord, mode: &InputMode) -> Result<Vec<TrainSample<T>>> {
    match *mode {
        InputMode::Rescale { length } => {
            let (spatial, temporal) = if video.length() == length {
                (video.spatial.clone(), video.temporal.clone())
            } else {
                (rescale_sequence(&video.spatial, length)?, rescale_sequence(&video.temporal, length)?)
            };
            let gts = to_grid(&video.segments, video.duration, length).map_err(|e| Error::Annotation {
                id: video.id.clone(),
                msg: e.to_string(),
            })?;
            Ok(vec![TrainSample {
                id: video.id.clone(),
                spatial: spatial.cast(),
                temporal: temporal.cast(),
                labels: LabelSet::compute(&gts, length),
            }])
        }
        InputMode::Window { length, overlap } => Ok(sliding_windows(video, length, overlap)?
            .into_iter()
            .map(|w| TrainSample {
                id: format!("{}@{}", w.parent, w.offset),
                spatial: w.spatial.cast(),
                temporal: w.temporal.cast(),
                labels: LabelSet::compute(&w.gts, length),
            })
            .collect()),
    }
}

pub fn prepare_corpus<T: Real>(videos: &[VideoRecord], mode: &InputMode) -> Result<Vec<TrainSample<T>>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(prepare_samples(v, mode)?);
    }
    Ok(out)
}

/// Post-processing settings.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PostConfig {
    pub nms: SoftNmsConfig,
    pub retrieval: RetrievalConfig,
}

/// Raw score maps of one network input, row-major `L×L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMaps {
    pub offset: usize,
    pub length: usize,
    pub completeness: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoInference {
    pub id: String,
    pub maps: Vec<ScoreMaps>,
    pub proposals: Vec<Proposal>,
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Forward pass, fusion and candidate enumeration for one input placed at
/// `grid`; candidates ending past `limit` grid units are dropped.
fn window_candidates<T: Real>(
    model: &DbgModel<T>,
    spatial: &Tensor<T>,
    temporal: &Tensor<T>,
    grid: GridMapping,
    limit: usize,
    offset: usize,
) -> Result<(ScoreMaps, Vec<Proposal>)> {
    let out = model.forward(spatial, temporal)?;
    let fused = FusedMaps::new(&out.completeness, &out.start, &out.end)?;
    let candidates = dense_candidates(&fused, grid).into_iter().filter(|p| p.end <= limit).collect();
    let maps = ScoreMaps {
        offset,
        length: fused.length,
        completeness: to_f64(&out.completeness),
        start: to_f64(&out.start),
        end: to_f64(&out.end),
    };
    Ok((maps, candidates))
}

/// Proposals of one video. In window mode the candidates of every window
/// are merged in video coordinates before Soft-NMS.
pub fn infer_video<T: Real>(model: &DbgModel<T>, video: &VideoRecord, mode: &InputMode, post: &PostConfig) -> Result<VideoInference> {
    let l = model.config().length;
    if mode.length() != l {
        return Err(Error::Invalid(format!("mode expects L={}, model has L={l}", mode.length())));
    }
    let mut maps = Vec::new();
    let mut candidates = Vec::new();
    match *mode {
        InputMode::Rescale { length } => {
            let sample = prepare_samples::<T>(&VideoRecord { segments: Vec::new(), ..video.clone() }, mode)?
                .pop()
                .expect("one sample per video");
            let grid = GridMapping::rescaled(length, video.duration);
            let (m, c) = window_candidates(model, &sample.spatial, &sample.temporal, grid, length, 0)?;
            maps.push(m);
            candidates = c;
        }
        InputMode::Window { length, overlap } => {
            let stripped = VideoRecord { segments: Vec::new(), ..video.clone() };
            let spu = video.duration / video.length() as f64;
            for w in sliding_windows(&stripped, length, overlap)? {
                let grid = GridMapping { offset: w.offset as f64, seconds_per_unit: spu };
                let limit = (video.length() - w.offset).min(length);
                let (m, c) = window_candidates(model, &w.spatial.cast(), &w.temporal.cast(), grid, limit, w.offset)?;
                maps.push(m);
                candidates.extend(c);
            }
        }
    }
    let proposals = finalize(candidates, &post.nms, &post.retrieval)?;
    Ok(VideoInference {
        id: video.id.clone(),
        maps,
        proposals,
    })
}

/// `{id: [{start_s, end_s, score}, …]}` in id order.
pub fn proposals_json(results: &[VideoInference]) -> Result<String> {
    #[derive(Serialize)]
    struct Entry {
        start_s: f64,
        end_s: f64,
        score: f64,
    }
    let map: std::collections::BTreeMap<&str, Vec<Entry>> = results
        .iter()
        .map(|r| {
            (
                r.id.as_str(),
                r.proposals
                    .iter()
                    .map(|p| Entry {
                        start_s: p.start_s,
                        end_s: p.end_s,
                        score: p.score,
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(serde_json::to_string_pretty(&map)?)
}

/// Per video id, `(start, end, score)` in descending score order.
pub type RankedProposals = std::collections::BTreeMap<String, Vec<(f64, f64, f64)>>;

/// Parses the output of [`proposals_json`] into ranked `(start, end, score)` lists.
pub fn parse_proposals_json(json: &str) -> Result<RankedProposals> {
    #[derive(Deserialize)]
    struct Entry {
        start_s: f64,
        end_s: f64,
        score: f64,
    }
    let raw: std::collections::BTreeMap<String, Vec<Entry>> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|(id, v)| {
            let mut list: Vec<(f64, f64, f64)> = v.into_iter().map(|e| (e.start_s, e.end_s, e.score)).collect();
            for &(s, e, _) in &list {
                if !(s.is_finite() && e.is_finite()) || s >= e {
                    return Err(Error::Annotation {
                        id: id.clone(),
                        msg: format!("proposal [{s}, {e}] needs start < end"),
                    });
                }
            }
            list.sort_by(|a, b| b.2.total_cmp(&a.2));
            Ok((id, list))
        })
        .collect()
}

//! Event-split trajectories: padded alternating segment and event blocks.

use serde::Serialize;

/// One smooth piece of the trajectory on `[t_start, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBlock {
    pub t_start: f64,
    pub t_end: f64,
    /// Normalized node coordinates, `eta[0] = 0`, last entry `1`.
    pub eta: Vec<f64>,
    pub nodes_x: Vec<Vec<f64>>,
    pub nodes_z: Vec<Vec<f64>>,
    pub nodes_xdot: Vec<Vec<f64>>,
    /// Co-integrated auxiliary state (forward sensitivities), empty when unused.
    pub nodes_aux: Vec<Vec<f64>>,
    pub nodes_auxdot: Vec<Vec<f64>>,
}

impl SegmentBlock {
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn node_time(&self, k: usize) -> f64 {
        if k + 1 == self.eta.len() {
            return self.t_end;
        }
        self.t_start + self.eta[k] * (self.t_end - self.t_start)
    }

    pub fn node_times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.node_time(k)).collect()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// A state-triggered discontinuity at `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventBlock {
    pub tau: f64,
    pub event_index: usize,
    pub x_minus: Vec<f64>,
    pub z_minus: Vec<f64>,
    pub x_plus: Vec<f64>,
    pub z_plus: Vec<f64>,
    /// Total time derivative of the fired guard just before the event.
    pub guard_rate: f64,
    pub aux_minus: Vec<f64>,
    pub aux_plus: Vec<f64>,
    /// Per-event auxiliary record (event-time sensitivities).
    pub aux_record: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Padding,
    Segment(SegmentBlock),
    Event(EventBlock),
}

impl Block {
    /// 0 = padding, 1 = segment, 2 = event.
    pub fn kind_code(&self) -> u8 {
        match self {
            Block::Padding => 0,
            Block::Segment(_) => 1,
            Block::Event(_) => 2,
        }
    }
}

/// Warning raised during simulation without aborting it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrazingWarning {
    pub event: usize,
    pub tau: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventSplitTrajectory {
    pub blocks: Vec<Block>,
    pub k_max: usize,
    pub saturated: bool,
    pub horizon: f64,
    pub p: Vec<f64>,
    pub grazing: Vec<GrazingWarning>,
}

impl EventSplitTrajectory {
    pub fn segments(&self) -> impl Iterator<Item = &SegmentBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Segment(s) => Some(s),
            _ => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &EventBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.segments().count()
    }

    pub fn n_events(&self) -> usize {
        self.events().count()
    }

    pub fn kind_codes(&self) -> Vec<u8> {
        self.blocks.iter().map(Block::kind_code).collect()
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.events().map(|e| e.tau).collect()
    }

    /// Real segments in time order.
    pub fn segment_list(&self) -> Vec<&SegmentBlock> {
        self.segments().collect()
    }

    pub fn event_list(&self) -> Vec<&EventBlock> {
        self.events().collect()
    }
}

/// Serializable event log entry.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EventRecord {
    pub tau: f64,
    pub event_index: usize,
    pub x_minus: Vec<f64>,
    pub x_plus: Vec<f64>,
}

impl From<&EventBlock> for EventRecord {
    fn from(e: &EventBlock) -> Self {
        Self { tau: e.tau, event_index: e.event_index, x_minus: e.x_minus.clone(), x_plus: e.x_plus.clone() }
    }
}

/// Dense rows `(t, x, z)` of a trajectory; events appear as a pre row then a
/// post row at the same time.
pub fn trajectory_rows(traj: &EventSplitTrajectory) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    let mut rows = Vec::new();
    for b in &traj.blocks {
        match b {
            Block::Segment(s) => {
                for k in 0..s.len() {
                    rows.push((s.node_time(k), s.nodes_x[k].clone(), s.nodes_z[k].clone()));
                }
            }
            Block::Event(_) | Block::Padding => {}
        }
    }
    rows
}

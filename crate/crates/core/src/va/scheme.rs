use serde::{Deserialize, Serialize};

use crate::encodings::BevConfig;
use crate::error::{config_err, Result};

/// Surround camera positions. Discriminants are the view indices used by
/// image tensors and view groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    FrontLeft = 0,
    Front = 1,
    FrontRight = 2,
    BackLeft = 3,
    Back = 4,
    BackRight = 5,
}

impl View {
    pub const ALL: [View; 6] = [View::FrontLeft, View::Front, View::FrontRight, View::BackLeft, View::Back, View::BackRight];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Optical-axis azimuth in degrees, counter-clockwise from ego +x.
    pub fn azimuth_deg(self) -> f64 {
        match self {
            View::Front => 0.0,
            View::FrontLeft => 60.0,
            View::BackLeft => 120.0,
            View::Back => 180.0,
            View::BackRight => -120.0,
            View::FrontRight => -60.0,
        }
    }

    /// Neighbour reached by turning clockwise (seen from above).
    pub fn clockwise(self) -> View {
        match self {
            View::Front => View::FrontRight,
            View::FrontRight => View::BackRight,
            View::BackRight => View::Back,
            View::Back => View::BackLeft,
            View::BackLeft => View::FrontLeft,
            View::FrontLeft => View::Front,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::FrontLeft => "CAM_FRONT_LEFT",
            View::Front => "CAM_FRONT",
            View::FrontRight => "CAM_FRONT_RIGHT",
            View::BackLeft => "CAM_BACK_LEFT",
            View::Back => "CAM_BACK",
            View::BackRight => "CAM_BACK_RIGHT",
        }
    }

    /// View whose ±30° sector contains the azimuth `deg`.
    pub fn sector_of(deg: f64) -> View {
        let s = ((deg + 30.0).rem_euclid(360.0) / 60.0).floor() as usize;
        [View::Front, View::FrontLeft, View::BackLeft, View::Back, View::BackRight, View::FrontRight][s.min(5)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Global,
    Rec2x2,
    Rec2x3,
    PolarA,
    PolarB,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] =
        [SchemeKind::Global, SchemeKind::Rec2x2, SchemeKind::Rec2x3, SchemeKind::PolarA, SchemeKind::PolarB];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Global => "global",
            SchemeKind::Rec2x2 => "rec2x2",
            SchemeKind::Rec2x3 => "rec2x3",
            SchemeKind::PolarA => "polar-a",
            SchemeKind::PolarB => "polar-b",
        }
    }

    /// Views per group.
    pub fn group_size(self) -> usize {
        match self {
            SchemeKind::Global => 6,
            SchemeKind::Rec2x2 | SchemeKind::Rec2x3 => 3,
            SchemeKind::PolarA => 1,
            SchemeKind::PolarB => 2,
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown window scheme {s:?}")))
    }
}

/// Partition of the BEV grid into windows plus the views each window reads.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScheme {
    pub kind: SchemeKind,
    pub height: usize,
    pub width: usize,
    /// Window id of every grid, row-major.
    pub assignment: Vec<usize>,
    /// Grids of every window, ascending.
    pub windows: Vec<Vec<usize>>,
    /// View indices feeding every window, in concatenation order.
    pub groups: Vec<Vec<usize>>,
    /// Largest window cell count; windows are zero padded to it for batching.
    pub pad_to: usize,
    pub window_names: Vec<String>,
}

impl WindowScheme {
    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn max_group(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Whether BEV grid `cell` may attend to view `view`.
    pub fn allows(&self, cell: usize, view: usize) -> bool {
        self.groups[self.assignment[cell]].contains(&view)
    }
}

pub fn build_scheme(kind: SchemeKind, cfg: &BevConfig, n_views: usize) -> Result<WindowScheme> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    if kind != SchemeKind::Global && n_views != 6 {
        return Err(config_err(format!("{} routing needs 6 views, got {n_views}", kind.name())));
    }
    let ids = |vs: &[View]| vs.iter().map(|v| v.index()).collect::<Vec<_>>();
    let (assignment, groups, window_names): (Vec<usize>, Vec<Vec<usize>>, Vec<String>) = match kind {
        SchemeKind::Global => (vec![0; h * w], vec![(0..n_views).collect()], vec!["all".into()]),
        SchemeKind::Rec2x2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(config_err(format!("rec2x2 needs even grid extents, got {h}x{w}")));
            }
            let assignment = (0..h * w).map(|i| 2 * usize::from(i / w >= h / 2) + usize::from(i % w >= w / 2)).collect();
            use View::*;
            let groups = vec![
                ids(&[FrontLeft, Front, BackLeft]),
                ids(&[Front, FrontRight, BackRight]),
                ids(&[FrontLeft, BackLeft, Back]),
                ids(&[FrontRight, Back, BackRight]),
            ];
            (assignment, groups, ["FL", "FR", "BL", "BR"].map(String::from).to_vec())
        }
        SchemeKind::Rec2x3 => {
            if h % 2 != 0 || w < 3 {
                return Err(config_err(format!("rec2x3 needs an even height and width ≥ 3, got {h}x{w}")));
            }
            let block = w.div_ceil(3);
            let assignment = (0..h * w).map(|i| 3 * usize::from(i / w >= h / 2) + (i % w) / block).collect();
            use View::*;
            let front = ids(&[FrontLeft, Front, FrontRight]);
            let back = ids(&[BackLeft, Back, BackRight]);
            let groups = vec![front.clone(), front.clone(), front, back.clone(), back.clone(), back];
            let names = ["F-left", "F-mid", "F-right", "B-left", "B-mid", "B-right"].map(String::from).to_vec();
            (assignment, groups, names)
        }
        SchemeKind::PolarA | SchemeKind::PolarB => {
            // sectors ordered counter-clockwise starting at the front
            let order = [View::Front, View::FrontLeft, View::BackLeft, View::Back, View::BackRight, View::FrontRight];
            let mut assignment = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let (x, y) = cfg.grid_center(r, c);
                    let view = View::sector_of(y.atan2(x).to_degrees());
                    assignment.push(order.iter().position(|&v| v == view).expect("sector"));
                }
            }
            let groups = order
                .iter()
                .map(|&v| if kind == SchemeKind::PolarA { vec![v.index()] } else { vec![v.index(), v.clockwise().index()] })
                .collect();
            (assignment, groups, order.iter().map(|v| v.name().to_owned()).collect())
        }
    };
    let mut windows = vec![Vec::new(); groups.len()];
    for (cell, &win) in assignment.iter().enumerate() {
        windows[win].push(cell);
    }
    let pad_to = match kind {
        // batched rectangular blocks have the nominal block size
        SchemeKind::Rec2x3 => (h / 2) * w.div_ceil(3),
        _ => windows.iter().map(Vec::len).max().unwrap_or(0),
    };
    Ok(WindowScheme { kind, height: h, width: w, assignment, windows, groups, pad_to, window_names })
}

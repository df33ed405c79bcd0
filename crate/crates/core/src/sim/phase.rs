use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Compass side of an intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "N")]
    North,
    #[serde(rename = "E")]
    East,
    #[serde(rename = "S")]
    South,
    #[serde(rename = "W")]
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::East, Direction::South, Direction::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::North => Direction::South,
            Direction::South => Direction::North,
            Direction::East => Direction::West,
            Direction::West => Direction::East,
        }
    }

    /// Heading after a left turn, with north up and right-hand traffic.
    pub fn left_of(self) -> Self {
        match self {
            Direction::North => Direction::West,
            Direction::West => Direction::South,
            Direction::South => Direction::East,
            Direction::East => Direction::North,
        }
    }

    pub fn right_of(self) -> Self {
        self.left_of().opposite()
    }

    /// Unit grid offset (x grows east, y grows north).
    pub fn offset(self) -> (i64, i64) {
        match self {
            Direction::North => (0, 1),
            Direction::East => (1, 0),
            Direction::South => (0, -1),
            Direction::West => (-1, 0),
        }
    }

    /// Direction of the vector `(dx, dy)` along its dominant axis.
    pub fn from_vector(dx: f64, dy: f64) -> Option<Self> {
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        Some(if dx.abs() >= dy.abs() {
            if dx > 0.0 { Direction::East } else { Direction::West }
        } else if dy > 0.0 {
            Direction::North
        } else {
            Direction::South
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::North => "North",
            Direction::East => "East",
            Direction::South => "South",
            Direction::West => "West",
        }
    }
}

/// Movement a lane serves at its downstream intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Through,
    Left,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Through, Movement::Left, Movement::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Side of the intersection a vehicle leaves by, given the side it came from.
    pub fn exit_side(self, approach: Direction) -> Direction {
        let heading = approach.opposite();
        match self {
            Movement::Through => heading,
            Movement::Left => heading.left_of(),
            Movement::Right => heading.right_of(),
        }
    }

    /// Movement that takes a vehicle arriving from `approach` out through `exit`.
    pub fn between(approach: Direction, exit: Direction) -> Option<Self> {
        Movement::ALL.into_iter().find(|m| m.exit_side(approach) == exit)
    }
}

/// One of the four signal phases, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalPhase {
    #[serde(rename = "ETWT")]
    Etwt,
    #[serde(rename = "NTST")]
    Ntst,
    #[serde(rename = "ELWL")]
    Elwl,
    #[serde(rename = "NLSL")]
    Nlsl,
}

impl SignalPhase {
    pub const ALL: [SignalPhase; 4] = [SignalPhase::Etwt, SignalPhase::Ntst, SignalPhase::Elwl, SignalPhase::Nlsl];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SignalPhase::Etwt => "ETWT",
            SignalPhase::Ntst => "NTST",
            SignalPhase::Elwl => "ELWL",
            SignalPhase::Nlsl => "NLSL",
        }
    }

    /// The two approaches whose lanes get green.
    pub fn approaches(self) -> [Direction; 2] {
        match self {
            SignalPhase::Etwt | SignalPhase::Elwl => [Direction::East, Direction::West],
            SignalPhase::Ntst | SignalPhase::Nlsl => [Direction::North, Direction::South],
        }
    }

    pub fn movement(self) -> Movement {
        match self {
            SignalPhase::Etwt | SignalPhase::Ntst => Movement::Through,
            SignalPhase::Elwl | SignalPhase::Nlsl => Movement::Left,
        }
    }

    /// Whether a lane may pass while this phase is green. Right turns always may.
    pub fn permits(self, approach: Direction, movement: Movement) -> bool {
        movement == Movement::Right
            || (movement == self.movement() && self.approaches().contains(&approach))
    }

    /// Human description used in prompts.
    pub fn relieves(self) -> &'static str {
        match self {
            SignalPhase::Etwt => "Eastern and western through lanes.",
            SignalPhase::Ntst => "Northern and southern through lanes.",
            SignalPhase::Elwl => "Eastern and western left-turn lanes.",
            SignalPhase::Nlsl => "Northern and southern left-turn lanes.",
        }
    }
}

impl fmt::Display for SignalPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignalPhase {
    type Err = String;

    /// Exact, case-sensitive match on the phase name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown signal phase {s:?}"))
    }
}

/// The eight signal-controlled lanes in fixed order: both lanes of ETWT, then
/// NTST, ELWL, NLSL. Controlled lane `k` belongs to phase `k / 2`.
pub const CONTROLLED_LANES: [(Direction, Movement); 8] = [
    (Direction::East, Movement::Through),
    (Direction::West, Movement::Through),
    (Direction::North, Movement::Through),
    (Direction::South, Movement::Through),
    (Direction::East, Movement::Left),
    (Direction::West, Movement::Left),
    (Direction::North, Movement::Left),
    (Direction::South, Movement::Left),
];

use std::fmt;

use serde::{Deserialize, Serialize};

/// The seven evaluation classes, in their fixed table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Bus,
    Motorcycle,
    Truck,
    Trailer,
    Bicycle,
    Human,
}

pub const NUM_CLASSES: usize = 7;

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [
        ObjectClass::Car,
        ObjectClass::Bus,
        ObjectClass::Motorcycle,
        ObjectClass::Truck,
        ObjectClass::Trailer,
        ObjectClass::Bicycle,
        ObjectClass::Human,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Bus => "Bus",
            ObjectClass::Motorcycle => "Motorcycle",
            ObjectClass::Truck => "Truck",
            ObjectClass::Trailer => "Trailer",
            ObjectClass::Bicycle => "Bicycle",
            ObjectClass::Human => "Human",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

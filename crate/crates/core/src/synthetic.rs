//! Seeded procedural furniture made of cuboid parts, with ground-truth leaf
//! labels. Used for examples, tests and the ablation benchmark.
//!
//! Shapes are y-up. Points are sampled on box surfaces at a fixed density,
//! so parts with equal dimensions get equal point counts. A configurable
//! fraction of repeated part groups is exactly symmetric; in the rest one
//! member is resized enough to fall outside the symmetry tolerance.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{stable_hash, DatasetError, PartRecord, PreparationConfig, PreparedDataset, ShapeRecord};
use crate::geometry::Point3;
use crate::label_tree::{LabelNode, LabelTree, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Chair,
    Table,
    Lamp,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Chair => "chair",
            Family::Table => "table",
            Family::Lamp => "lamp",
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chair" => Ok(Family::Chair),
            "table" => Ok(Family::Table),
            "lamp" => Ok(Family::Lamp),
            other => Err(format!("unknown family `{other}` (chair, table, lamp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub family: Family,
    pub shapes: usize,
    pub seed: u64,
    /// Probability that a repeated part group is exactly symmetric.
    pub symmetric_fraction: f64,
    /// Surface points per unit area.
    pub density: f64,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            family: Family::Chair,
            shapes: 50,
            seed: 0,
            symmetric_fraction: 0.8,
            density: 3000.0,
            id_prefix: "chair".into(),
        }
    }
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

fn leaves(names: &[&str], offset: usize) -> Vec<LabelNode> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| LabelNode::leaf(n, PALETTE[(offset + i) % PALETTE.len()]))
        .collect()
}

fn and(id: &str, children: Vec<LabelNode>) -> LabelNode {
    LabelNode::internal(id, NodeKind::And, children)
}

/// The raw (unpruned) taxonomy of a family.
pub fn label_tree(family: Family) -> LabelTree {
    let root = match family {
        Family::Chair => and(
            "chair",
            vec![
                and("back", leaves(&["back_surface", "back_post", "back_slat"], 0)),
                and("seat", leaves(&["seat_surface", "seat_bar"], 3)),
                LabelNode::internal(
                    "base",
                    NodeKind::Or,
                    vec![
                        and("regular_base", leaves(&["leg", "runner", "foot_pad"], 5)),
                        and("star_base", leaves(&["spoke", "caster", "column"], 8)),
                    ],
                ),
                LabelNode::leaf("armrest", PALETTE[11]),
            ],
        ),
        Family::Table => and(
            "table",
            vec![
                LabelNode::leaf("tabletop", PALETTE[0]),
                LabelNode::internal(
                    "table_base",
                    NodeKind::Or,
                    vec![
                        and("leg_base", leaves(&["table_leg", "apron", "stretcher"], 1)),
                        and("pedestal_base", leaves(&["pedestal", "table_foot", "hub"], 4)),
                    ],
                ),
            ],
        ),
        Family::Lamp => and(
            "lamp",
            vec![
                LabelNode::leaf("shade", PALETTE[0]),
                LabelNode::internal(
                    "lamp_body",
                    NodeKind::Or,
                    vec![
                        and("floor_body", leaves(&["pole", "base_plate", "arm"], 1)),
                        and("desk_body", leaves(&["neck", "lamp_foot", "joint"], 4)),
                    ],
                ),
            ],
        ),
    };
    LabelTree::from_root(root).expect("built-in taxonomy is valid")
}

struct Builder {
    rng: ChaCha8Rng,
    density: f64,
    symmetric_fraction: f64,
    parts: Vec<PartRecord>,
}

impl Builder {
    fn u(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }

    /// Surface samples of an axis-aligned box of `size` centered at 0.
    fn sample_box(&mut self, size: [f64; 3]) -> Vec<Point3> {
        let [sx, sy, sz] = size;
        let faces = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy];
        let area: f64 = faces.iter().sum();
        let n = ((area * self.density).round() as usize).max(24);
        (0..n)
            .map(|_| {
                let mut pick = self.rng.gen::<f64>() * area;
                let mut face = 0;
                while face < 5 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let a = self.rng.gen::<f64>() - 0.5;
                let b = self.rng.gen::<f64>() - 0.5;
                let sign = if face % 2 == 0 { -0.5 } else { 0.5 };
                match face / 2 {
                    0 => [sign * sx, a * sy, b * sz],
                    1 => [a * sx, sign * sy, b * sz],
                    _ => [a * sx, b * sy, sign * sz],
                }
            })
            .collect()
    }

    /// Places local points: rotation by `yaw` about y, then translation.
    fn place(&mut self, label: &str, local: &[Point3], center: Point3, yaw: f64) {
        let (s, c) = yaw.sin_cos();
        let points = local
            .iter()
            .map(|p| {
                [
                    center[0] + c * p[0] - s * p[2],
                    center[1] + p[1],
                    center[2] + s * p[0] + c * p[2],
                ]
            })
            .collect();
        self.parts.push(PartRecord {
            id: self.parts.len() as u32,
            points,
            gt_label: Some(label.to_string()),
        });
    }

    fn add_box(&mut self, label: &str, center: Point3, size: [f64; 3], yaw: f64) {
        let local = self.sample_box(size);
        self.place(label, &local, center, yaw);
    }

    /// Repeated parts, instanced from one sampled box. Unless the group
    /// comes out symmetric, the last member is stretched along one axis.
    fn add_group(&mut self, label: &str, placements: &[(Point3, f64)], size: [f64; 3]) {
        let symmetric = placements.len() < 2 || self.chance(self.symmetric_fraction);
        let axis = self.rng.gen_range(0..3);
        let stretch = self.u(1.2, 1.45);
        let local = self.sample_box(size);
        for (i, &(center, yaw)) in placements.iter().enumerate() {
            if !symmetric && i + 1 == placements.len() {
                let stretched: Vec<Point3> = local
                    .iter()
                    .map(|p| {
                        let mut q = *p;
                        q[axis] *= stretch;
                        q
                    })
                    .collect();
                self.place(label, &stretched, center, yaw);
            } else {
                self.place(label, &local, center, yaw);
            }
        }
    }

    // Base parts are deliberately alike across base styles: casters and
    // foot pads are both small blocks on the floor, spokes and runners
    // both low horizontal bars, legs and the column both vertical supports.
    // Only the assembly they belong to tells them apart.
    fn chair(&mut self) {
        let w = self.u(0.42, 0.6);
        let d = self.u(0.4, 0.55);
        let h = self.u(0.38, 0.5);
        let t = self.u(0.03, 0.07);
        self.add_box("seat_surface", [0.0, h, 0.0], [w, t, d], 0.0);
        let below = h - t / 2.0;
        if self.chance(0.5) {
            let bar = [w * 0.9, self.u(0.02, 0.04), self.u(0.02, 0.04)];
            let y = below - bar[1] / 2.0;
            self.add_group("seat_bar", &[([0.0, y, d * 0.4], 0.0), ([0.0, y, -d * 0.4], 0.0)], bar);
        }

        let bh = self.u(0.35, 0.6);
        let pw = self.u(0.025, 0.05);
        let zb = -d / 2.0 + pw / 2.0;
        let px = w / 2.0 - pw / 2.0;
        let top = h + t / 2.0 + bh;
        self.add_group(
            "back_post",
            &[([px, h + t / 2.0 + bh / 2.0, zb], 0.0), ([-px, h + t / 2.0 + bh / 2.0, zb], 0.0)],
            [pw, bh, pw],
        );
        let inner = w - 2.0 * pw;
        if self.chance(0.6) {
            let ph = bh * self.u(0.5, 0.9);
            let pt = self.u(0.02, 0.04);
            self.add_box("back_surface", [0.0, top - ph / 2.0, zb], [inner, ph, pt], 0.0);
        } else {
            let n = self.rng.gen_range(2..=5);
            let sw = self.u(0.02, 0.05).min(inner / (n as f64 + 1.0));
            let sh = bh * self.u(0.6, 0.9);
            let y = top - sh / 2.0;
            let slots: Vec<(Point3, f64)> = (0..n)
                .map(|i| {
                    let x = -inner / 2.0 + inner * (i as f64 + 1.0) / (n as f64 + 1.0);
                    ([x, y, zb], 0.0)
                })
                .collect();
            self.add_group("back_slat", &slots, [sw, sh, 0.02]);
        }
        if self.chance(0.45) {
            let ay = h + self.u(0.18, 0.25);
            let ax = w / 2.0 + 0.03;
            let size = [self.u(0.03, 0.07), self.u(0.02, 0.04), d * self.u(0.6, 0.9)];
            self.add_group("armrest", &[([ax, ay, 0.0], 0.0), ([-ax, ay, 0.0], 0.0)], size);
        }

        let block = [self.u(0.03, 0.06), self.u(0.025, 0.05), self.u(0.03, 0.06)];
        let bar_w = self.u(0.02, 0.045);
        let bar_y = self.u(0.04, 0.16);
        if self.chance(0.55) {
            let lw = self.u(0.03, 0.07);
            let pad = self.chance(0.5);
            let lift = if pad { block[1] } else { 0.0 };
            let lx = w / 2.0 - lw / 2.0 - self.u(0.0, 0.06);
            let lz = d / 2.0 - lw / 2.0 - self.u(0.0, 0.06);
            let corners = [[lx, lz], [-lx, lz], [lx, -lz], [-lx, -lz]];
            let leg_h = below - lift;
            let legs: Vec<(Point3, f64)> = corners.iter().map(|c| ([c[0], lift + leg_h / 2.0, c[1]], 0.0)).collect();
            self.add_group("leg", &legs, [lw, leg_h, lw]);
            if pad {
                let pads: Vec<(Point3, f64)> = corners.iter().map(|c| ([c[0], block[1] / 2.0, c[1]], 0.0)).collect();
                self.add_group("foot_pad", &pads, block);
            }
            if self.chance(0.6) {
                let len = 2.0 * lz - lw;
                self.add_group(
                    "runner",
                    &[([lx, bar_y + lift, 0.0], 0.0), ([-lx, bar_y + lift, 0.0], 0.0)],
                    [bar_w, bar_w, len],
                );
            }
        } else {
            let cw = self.u(0.04, 0.09);
            let casters = self.chance(0.7);
            let lift = if casters { block[1] } else { 0.0 };
            let sy = lift + bar_w / 2.0;
            let col_h = below - lift - bar_w;
            self.add_box("column", [0.0, lift + bar_w + col_h / 2.0, 0.0], [cw, col_h, cw], 0.0);
            let r = self.u(0.22, 0.34);
            let phase = self.u(0.0, TAU / 5.0);
            let dirs: Vec<f64> = (0..5).map(|k| phase + TAU * k as f64 / 5.0).collect();
            let spokes: Vec<(Point3, f64)> = dirs
                .iter()
                .map(|&a| ([a.cos() * r / 2.0, sy, a.sin() * r / 2.0], a))
                .collect();
            self.add_group("spoke", &spokes, [r, bar_w, bar_w]);
            if casters {
                let wheels: Vec<(Point3, f64)> = dirs
                    .iter()
                    .map(|&a| ([a.cos() * r, block[1] / 2.0, a.sin() * r], a))
                    .collect();
                self.add_group("caster", &wheels, block);
            }
        }
    }

    fn table(&mut self) {
        let w = self.u(0.8, 1.4);
        let d = self.u(0.5, 0.9);
        let h = self.u(0.65, 0.8);
        let t = self.u(0.03, 0.06);
        self.add_box("tabletop", [0.0, h, 0.0], [w, t, d], 0.0);
        let below = h - t / 2.0;
        if self.chance(0.6) {
            let lw = self.u(0.04, 0.08);
            let lx = w / 2.0 - lw / 2.0 - self.u(0.0, 0.08);
            let lz = d / 2.0 - lw / 2.0 - self.u(0.0, 0.08);
            let legs: Vec<(Point3, f64)> = [[lx, lz], [-lx, lz], [lx, -lz], [-lx, -lz]]
                .iter()
                .map(|c| ([c[0], below / 2.0, c[1]], 0.0))
                .collect();
            self.add_group("table_leg", &legs, [lw, below, lw]);
            if self.chance(0.7) {
                let ah = self.u(0.06, 0.12);
                let y = below - ah / 2.0;
                self.add_group("apron", &[([0.0, y, lz], 0.0), ([0.0, y, -lz], 0.0)], [2.0 * lx - lw, ah, 0.02]);
            }
            if self.chance(0.5) {
                let y = self.u(0.1, 0.25);
                self.add_group("stretcher", &[([lx, y, 0.0], 0.0), ([-lx, y, 0.0], 0.0)], [0.03, 0.03, 2.0 * lz - lw]);
            }
        } else {
            let cw = self.u(0.08, 0.16);
            let fh = self.u(0.03, 0.06);
            self.add_box("pedestal", [0.0, fh + (below - fh) / 2.0, 0.0], [cw, below - fh, cw], 0.0);
            let n = self.rng.gen_range(3..=4);
            let r = self.u(0.25, 0.4);
            let feet: Vec<(Point3, f64)> = (0..n)
                .map(|k| {
                    let a = TAU * k as f64 / n as f64;
                    ([a.cos() * r / 2.0, fh / 2.0, a.sin() * r / 2.0], a)
                })
                .collect();
            self.add_group("table_foot", &feet, [r, fh, 0.06]);
            if self.chance(0.6) {
                self.add_box("hub", [0.0, below - 0.02, 0.0], [cw * 2.5, 0.04, cw * 2.5], 0.0);
            }
        }
    }

    fn lamp(&mut self) {
        if self.chance(0.5) {
            let ph = self.u(1.2, 1.7);
            let bw = self.u(0.25, 0.4);
            self.add_box("base_plate", [0.0, 0.015, 0.0], [bw, 0.03, bw], 0.0);
            self.add_box("pole", [0.0, 0.03 + ph / 2.0, 0.0], [0.03, ph, 0.03], 0.0);
            let arms = self.rng.gen_range(1..=2);
            let al = self.u(0.2, 0.35);
            let placements: Vec<(Point3, f64)> = (0..arms)
                .map(|k| {
                    let x = if k == 0 { al / 2.0 } else { -al / 2.0 };
                    ([x, ph, 0.0], 0.0)
                })
                .collect();
            self.add_group("arm", &placements, [al, 0.02, 0.02]);
            let sw = self.u(0.25, 0.45);
            let sh = self.u(0.2, 0.3);
            self.add_box("shade", [0.0, ph + 0.15, 0.0], [sw, sh, sw], 0.0);
        } else {
            let fw = self.u(0.12, 0.2);
            self.add_box("lamp_foot", [0.0, 0.02, 0.0], [fw, 0.04, fw], 0.0);
            let nh = self.u(0.25, 0.4);
            self.add_box("neck", [0.0, 0.04 + nh / 2.0, 0.0], [0.02, nh, 0.02], 0.0);
            self.add_box("joint", [0.0, 0.04 + nh, 0.0], [0.04, 0.04, 0.04], 0.0);
            let sw = self.u(0.12, 0.2);
            self.add_box("shade", [sw / 2.0, 0.1 + nh, 0.0], [sw, 0.1, 0.1], 0.0);
        }
    }
}

/// Generates raw, unnormalized shape records. Each shape depends only on
/// the seed, family and its own id, so sets with a common prefix agree.
pub fn generate(config: &SyntheticConfig) -> Vec<ShapeRecord> {
    (0..config.shapes)
        .map(|i| {
            let id = format!("{}_{i:04}", config.id_prefix);
            let mut b = Builder {
                rng: ChaCha8Rng::seed_from_u64(config.seed ^ stable_hash(id.as_bytes())),
                density: config.density,
                symmetric_fraction: config.symmetric_fraction,
                parts: Vec::new(),
            };
            match config.family {
                Family::Chair => b.chair(),
                Family::Table => b.table(),
                Family::Lamp => b.lamp(),
            }
            ShapeRecord {
                id,
                parts: b.parts,
                normalization: Default::default(),
            }
        })
        .collect()
}

/// Generates, normalizes and prepares shapes in memory.
pub fn generate_dataset(config: &SyntheticConfig, prep: &PreparationConfig) -> Result<PreparedDataset, DatasetError> {
    let mut records = generate(config);
    for r in &mut records {
        r.normalize();
    }
    let name = format!("synthetic-{}", config.id_prefix);
    PreparedDataset::from_records(&name, config.family.name(), label_tree(config.family), &records, prep)
}

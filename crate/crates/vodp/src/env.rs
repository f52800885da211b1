//! Deterministic 2-D tabletop pick-and-place environment with a scripted
//! expert and a flat-shaded pixel renderer.
//!
//! The workspace is the unit square rendered to 64x64 RGB. A plate sits on
//! the left half; a cube spawns on a 4x4 grid covering the right half, cell
//! chosen round-robin by seed with a small seeded jitter. All dynamics and
//! pixels are pure functions of (seed, config, actions).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RES: usize = 64;
pub const JOINTS: usize = 3;
pub const MAX_STEPS: u32 = 200;
pub const STEP_CLAMP: f32 = 0.05;
pub const PLATE_CENTER: (f32, f32) = (0.22, 0.5);
pub const PLATE_RADIUS: f32 = 0.15;
pub const CUBE_SIDE: f32 = 0.12;
pub const GRIPPER_START: (f32, f32) = (0.5, 0.5);
/// The scripted expert moves slower than the env clamp allows, which keeps
/// demonstrations long enough to cover the approach behaviour densely.
pub const EXPERT_CLAMP: f32 = 0.018;
const PLACE_TOL: f32 = 0.005;

pub const GRID_CELLS: usize = 16;
const GRID_ORIGIN: (f32, f32) = (0.55, 0.2);
const GRID_CELL: (f32, f32) = (0.1, 0.15);
const JITTER: (f32, f32) = (0.02, 0.03);

pub const COLOR_TABLE: [f32; 3] = [0.82, 0.72, 0.55];
pub const COLOR_PLATE: [f32; 3] = [0.92, 0.92, 0.92];
pub const COLOR_GRIPPER: [f32; 3] = [0.15, 0.15, 0.15];
pub const COLOR_CUBE_ORANGE: [f32; 3] = [0.95, 0.45, 0.10];

pub fn cube_color(name: &str) -> Result<[f32; 3]> {
    match name {
        "orange" => Ok(COLOR_CUBE_ORANGE),
        "blue" => Ok([0.15, 0.35, 0.90]),
        "green" => Ok([0.15, 0.80, 0.25]),
        "yellow" => Ok([0.95, 0.90, 0.15]),
        other => Err(Error::Config(format!("unknown cube color '{other}' (orange|blue|green|yellow)"))),
    }
}

pub fn background_color(name: &str) -> Result<[f32; 3]> {
    match name {
        "table" => Ok(COLOR_TABLE),
        "white" => Ok([0.95, 0.95, 0.95]),
        "pink" => Ok([0.98, 0.75, 0.83]),
        "blue" => Ok([0.35, 0.45, 0.95]),
        other => Err(Error::Config(format!("unknown background '{other}' (table|white|pink|blue)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lighting {
    Normal,
    /// One brightness factor in [0.6, 1.4] drawn per episode.
    Switch,
    /// Alternates 0.7 / 1.3 every 5 steps.
    Blink,
}

impl std::str::FromStr for Lighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Lighting::Normal),
            "switch" => Ok(Lighting::Switch),
            "blink" => Ok(Lighting::Blink),
            other => Err(Error::Config(format!("unknown lighting '{other}' (normal|switch|blink)"))),
        }
    }
}

/// One visual condition for the robustness suites; the nominal task is the
/// default. Appearance fields never touch the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub size_scale: f32,
    pub cube_color: [f32; 3],
    pub background: [f32; 3],
    pub lighting: Lighting,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            size_scale: 1.0,
            cube_color: COLOR_CUBE_ORANGE,
            background: COLOR_TABLE,
            lighting: Lighting::Normal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grip {
    Open,
    Closed,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub gripper: (f32, f32),
    pub grip: Grip,
    pub cube: (f32, f32),
    pub cube_half: f32,
    pub held: bool,
    pub step_count: u32,
    pub success: bool,
    /// Brightness factor for switch lighting, drawn at reset.
    switch_brightness: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
    /// Set when the episode was aborted by a non-finite action.
    pub fault: bool,
}

/// Grid cell used by a given reset seed (round-robin coverage).
pub fn grid_cell(seed: u64) -> usize {
    (seed % GRID_CELLS as u64) as usize
}

fn cell_center(cell: usize) -> (f32, f32) {
    let ix = (cell % 4) as f32;
    let iy = (cell / 4) as f32;
    (GRID_ORIGIN.0 + GRID_CELL.0 * ix + GRID_CELL.0 * 0.5, GRID_ORIGIN.1 + GRID_CELL.1 * iy + GRID_CELL.1 * 0.5)
}

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

pub struct ToyEnv {
    pub state: EnvState,
    pub robustness: RobustnessConfig,
}

impl ToyEnv {
    /// Deterministic initial state: cube on the grid cell selected by the
    /// seed plus a small seeded jitter, plate and gripper fixed.
    pub fn reset(seed: u64, robustness: RobustnessConfig) -> ToyEnv {
        // all per-episode randomness is consumed here; dynamics are pure
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = grid_cell(seed);
        let (cx, cy) = cell_center(cell);
        let jx: f32 = rng.random_range(-JITTER.0..=JITTER.0);
        let jy: f32 = rng.random_range(-JITTER.1..=JITTER.1);
        let switch_brightness: f32 = rng.random_range(0.6..=1.4);
        let state = EnvState {
            gripper: GRIPPER_START,
            grip: Grip::Open,
            cube: (cx + jx, cy + jy),
            cube_half: CUBE_SIDE * robustness.size_scale / 2.0,
            held: false,
            step_count: 0,
            success: false,
            switch_brightness,
        };
        ToyEnv { state, robustness }
    }

    /// Proprioceptive reading: gripper x, y and the grip bit.
    pub fn state_vec(&self) -> [f32; JOINTS] {
        [
            self.state.gripper.0,
            self.state.gripper.1,
            if self.state.grip == Grip::Closed { 1.0 } else { 0.0 },
        ]
    }

    /// Applies (dx, dy, grip_cmd). Movement is clamped to +-0.05 per axis;
    /// the grip follows the command through the 0.5 threshold. A closed
    /// gripper within the cube's half-side of its center attaches the cube;
    /// opening releases it. Success: cube center inside the plate radius
    /// with the grip open.
    pub fn step(&mut self, action: &[f32; JOINTS]) -> StepOutcome {
        let s = &mut self.state;
        if action.iter().any(|v| !v.is_finite()) {
            s.step_count += 1;
            return StepOutcome { done: true, success: false, fault: true };
        }
        let dx = action[0].clamp(-STEP_CLAMP, STEP_CLAMP);
        let dy = action[1].clamp(-STEP_CLAMP, STEP_CLAMP);
        s.gripper.0 = (s.gripper.0 + dx).clamp(0.0, 1.0);
        s.gripper.1 = (s.gripper.1 + dy).clamp(0.0, 1.0);
        let want_closed = action[2] > 0.5;
        if want_closed {
            if !s.held && dist(s.gripper, s.cube) <= s.cube_half {
                s.held = true;
            }
            s.grip = Grip::Closed;
        } else {
            s.held = false;
            s.grip = Grip::Open;
        }
        if s.held {
            s.cube = s.gripper;
        }
        s.step_count += 1;
        s.success = s.grip == Grip::Open && dist(s.cube, PLATE_CENTER) <= PLATE_RADIUS;
        let done = s.success || s.step_count >= MAX_STEPS;
        StepOutcome { done, success: s.success, fault: false }
    }

    fn brightness(&self) -> f32 {
        match self.robustness.lighting {
            Lighting::Normal => 1.0,
            Lighting::Switch => self.state.switch_brightness,
            Lighting::Blink => {
                if (self.state.step_count / 5) % 2 == 0 {
                    0.7
                } else {
                    1.3
                }
            }
        }
    }

    /// Flat-shaded frame, nearest-pixel, no anti-aliasing: background,
    /// plate disk, cube square, gripper cross on top.
    pub fn render(&self) -> Vec<f32> {
        let s = &self.state;
        let mut img = Vec::with_capacity(RES * RES * 3);
        for _ in 0..RES * RES {
            img.extend_from_slice(&self.robustness.background);
        }
        let put = |img: &mut Vec<f32>, r: usize, c: usize, col: &[f32; 3]| {
            let o = (r * RES + c) * 3;
            img[o..o + 3].copy_from_slice(col);
        };
        for r in 0..RES {
            let py = (r as f32 + 0.5) / RES as f32;
            for c in 0..RES {
                let px = (c as f32 + 0.5) / RES as f32;
                let dpx = px - PLATE_CENTER.0;
                let dpy = py - PLATE_CENTER.1;
                if dpx * dpx + dpy * dpy <= PLATE_RADIUS * PLATE_RADIUS {
                    put(&mut img, r, c, &COLOR_PLATE);
                }
                if (px - s.cube.0).abs() <= s.cube_half && (py - s.cube.1).abs() <= s.cube_half {
                    put(&mut img, r, c, &self.robustness.cube_color);
                }
            }
        }
        let gc = ((s.gripper.0 * RES as f32) as isize).clamp(0, RES as isize - 1);
        let gr = ((s.gripper.1 * RES as f32) as isize).clamp(0, RES as isize - 1);
        for d in -3isize..=3 {
            for (r, c) in [(gr, gc + d), (gr + d, gc)] {
                if r >= 0 && r < RES as isize && c >= 0 && c < RES as isize {
                    put(&mut img, r as usize, c as usize, &COLOR_GRIPPER);
                }
            }
        }
        let b = self.brightness();
        if b != 1.0 {
            for v in img.iter_mut() {
                *v = (*v * b).clamp(0.0, 1.0);
            }
        }
        img
    }

    /// Scripted expert: approach the cube, close, carry to the plate
    /// center, open. Movement stays within the expert's own clamp.
    pub fn expert_action(&self) -> [f32; JOINTS] {
        let s = &self.state;
        let clamp = |v: f32| v.clamp(-EXPERT_CLAMP, EXPERT_CLAMP);
        if s.held {
            let dx = PLATE_CENTER.0 - s.gripper.0;
            let dy = PLATE_CENTER.1 - s.gripper.1;
            if dx.abs().max(dy.abs()) <= PLACE_TOL {
                return [0.0, 0.0, 0.0];
            }
            return [clamp(dx), clamp(dy), 1.0];
        }
        if s.grip == Grip::Closed {
            // stray closed grip without the cube: reopen before approaching
            return [0.0, 0.0, 0.0];
        }
        let dx = s.cube.0 - s.gripper.0;
        let dy = s.cube.1 - s.gripper.1;
        if dist(s.gripper, s.cube) <= s.cube_half * 0.5 {
            return [0.0, 0.0, 1.0];
        }
        [clamp(dx), clamp(dy), 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_deterministic() {
        let a = ToyEnv::reset(7, RobustnessConfig::default());
        let b = ToyEnv::reset(7, RobustnessConfig::default());
        assert_eq!(a.state.cube, b.state.cube);
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn sequential_seeds_cover_cells_round_robin() {
        let mut counts = [0usize; GRID_CELLS];
        for seed in 100..148 {
            counts[grid_cell(seed)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3), "{counts:?}");
    }

    #[test]
    fn size_scale_changes_only_cube_side() {
        let a = ToyEnv::reset(3, RobustnessConfig::default());
        let b = ToyEnv::reset(3, RobustnessConfig { size_scale: 1.6, ..Default::default() });
        assert_eq!(a.state.cube, b.state.cube);
        assert_eq!(a.state.gripper, b.state.gripper);
        assert_eq!(b.state.cube_half, CUBE_SIDE * 1.6 / 2.0);
        assert_ne!(a.state.cube_half, b.state.cube_half);
    }

    #[test]
    fn zero_action_only_advances_step_count() {
        let mut env = ToyEnv::reset(0, RobustnessConfig::default());
        let before = env.state.clone();
        env.step(&[0.0, 0.0, 0.0]);
        assert_eq!(env.state.gripper, before.gripper);
        assert_eq!(env.state.cube, before.cube);
        assert_eq!(env.state.step_count, before.step_count + 1);
    }

    #[test]
    fn grasp_outside_half_side_fails() {
        let mut env = ToyEnv::reset(0, RobustnessConfig::default());
        // gripper starts far from the cube: closing must not attach
        env.step(&[0.0, 0.0, 1.0]);
        assert!(!env.state.held);
        assert_eq!(env.state.grip, Grip::Closed);
    }

    #[test]
    fn nan_action_flags_fault() {
        let mut env = ToyEnv::reset(0, RobustnessConfig::default());
        let out = env.step(&[f32::NAN, 0.0, 0.0]);
        assert!(out.done && !out.success && out.fault);
    }

    #[test]
    fn expert_succeeds_from_100_seeds() {
        for seed in 0..100 {
            let mut env = ToyEnv::reset(seed, RobustnessConfig::default());
            let mut steps = 0;
            loop {
                let a = env.expert_action();
                let out = env.step(&a);
                steps += 1;
                if out.done {
                    assert!(out.success, "expert failed at seed {seed}");
                    break;
                }
                assert!(steps <= 200, "expert exceeded step cap at seed {seed}");
            }
            assert!(steps <= 120, "expert too slow at seed {seed}: {steps}");
        }
    }

    #[test]
    fn expert_succeeds_across_sizes() {
        for scale in [0.7f32, 1.0, 1.6] {
            for seed in 0..16 {
                let mut env = ToyEnv::reset(seed, RobustnessConfig { size_scale: scale, ..Default::default() });
                loop {
                    let a = env.expert_action();
                    let out = env.step(&a);
                    if out.done {
                        assert!(out.success, "expert failed: scale {scale} seed {seed}");
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn expert_phase_laws() {
        let mut env = ToyEnv::reset(0, RobustnessConfig::default());
        // teleport the gripper onto the cube for the phase check
        env.state.gripper = env.state.cube;
        let a = env.expert_action();
        assert_eq!(a, [0.0, 0.0, 1.0], "at the cube with open grip: close");
        env.step(&a);
        assert!(env.state.held);
        env.state.gripper = PLATE_CENTER;
        env.state.cube = PLATE_CENTER;
        let a = env.expert_action();
        assert_eq!(a[2], 0.0, "held above plate center: open");
    }

    #[test]
    fn appearance_changes_leave_dynamics_bitwise_identical() {
        let variants = [
            RobustnessConfig::default(),
            RobustnessConfig { cube_color: cube_color("blue").unwrap(), ..Default::default() },
            RobustnessConfig { background: background_color("pink").unwrap(), ..Default::default() },
            RobustnessConfig { lighting: Lighting::Blink, ..Default::default() },
            RobustnessConfig { lighting: Lighting::Switch, ..Default::default() },
        ];
        let trace = |cfg: RobustnessConfig| {
            let mut env = ToyEnv::reset(5, cfg);
            let mut tr = Vec::new();
            loop {
                let a = env.expert_action();
                tr.push((env.state.gripper, env.state.cube, a));
                if env.step(&a).done {
                    break;
                }
            }
            tr
        };
        let base = trace(variants[0]);
        for v in &variants[1..] {
            assert_eq!(trace(*v), base);
        }
    }

    #[test]
    fn success_is_monotone_under_idling() {
        let mut env = ToyEnv::reset(1, RobustnessConfig::default());
        loop {
            let a = env.expert_action();
            if env.step(&a).done {
                break;
            }
        }
        assert!(env.state.success);
        for _ in 0..5 {
            let out = env.step(&[0.0, 0.0, 0.0]);
            assert!(out.success);
        }
    }

    #[test]
    fn render_laws() {
        let env = ToyEnv::reset(2, RobustnessConfig::default());
        let img = env.render();
        // cube pixels carry the cube color exactly under normal lighting
        let (cx, cy) = env.state.cube;
        let c = (cx * RES as f32) as usize;
        let r = (cy * RES as f32) as usize;
        let o = (r * RES + c) * 3;
        assert_eq!(&img[o..o + 3], &COLOR_CUBE_ORANGE);
        // plate center pixel is plate colored
        let pc = ((PLATE_CENTER.1 * RES as f32) as usize * RES + (PLATE_CENTER.0 * RES as f32) as usize) * 3;
        assert_eq!(&img[pc..pc + 3], &COLOR_PLATE);
    }

    #[test]
    fn blink_brightness_law() {
        let mut env = ToyEnv::reset(2, RobustnessConfig { lighting: Lighting::Blink, ..Default::default() });
        let img0 = env.render();
        for _ in 0..5 {
            env.step(&[0.0, 0.0, 0.0]);
        }
        let img5 = env.render();
        // background pixel: frame 0 at 0.7, frame 5 at 1.3 (clamped)
        let b0 = img0[0];
        let b5 = img5[0];
        assert!((b0 - (COLOR_TABLE[0] * 0.7)).abs() < 1e-6);
        assert!((b5 - (COLOR_TABLE[0] * 1.3).min(1.0)).abs() < 1e-6);
    }

    #[test]
    fn cube_moves_shift_pixels() {
        let mut a = ToyEnv::reset(0, RobustnessConfig::default());
        let mut b = ToyEnv::reset(0, RobustnessConfig::default());
        // shift b's cube by one grid cell in x
        b.state.cube.0 += GRID_CELL.0;
        let img_a = a.render();
        let img_b = b.render();
        let shift_px = (GRID_CELL.0 * RES as f32).round() as usize;
        let (cx, cy) = a.state.cube;
        let c = (cx * RES as f32) as usize;
        let r = (cy * RES as f32) as usize;
        let at = |img: &[f32], r: usize, c: usize| img[(r * RES + c) * 3..(r * RES + c) * 3 + 3].to_vec();
        assert_eq!(at(&img_a, r, c), COLOR_CUBE_ORANGE.to_vec());
        assert_eq!(at(&img_b, r, c + shift_px), COLOR_CUBE_ORANGE.to_vec());
        let _ = (&mut a, &mut b);
    }
}

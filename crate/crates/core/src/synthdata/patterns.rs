use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DrumEvent, DrumPattern, Instrument};

/// Relative event probabilities per instrument and the tempo range patterns are
/// drawn from. A weight of zero removes the instrument entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMix {
    pub kick: f64,
    pub snare: f64,
    pub hihat: f64,
    pub tom: f64,
    pub crash: f64,
    /// BPM range `[lo, hi)` of the generated original tempi.
    pub tempo_range: (f64, f64),
}

impl Default for StyleMix {
    fn default() -> Self {
        StyleMix {
            kick: 1.0,
            snare: 1.0,
            hihat: 1.0,
            tom: 1.0,
            crash: 1.0,
            tempo_range: (90.0, 130.0),
        }
    }
}

impl StyleMix {
    fn weight(&self, inst: Instrument) -> f64 {
        match inst {
            Instrument::Kick => self.kick,
            Instrument::Snare => self.snare,
            Instrument::Hihat => self.hihat,
            Instrument::Tom => self.tom,
            Instrument::Crash => self.crash,
        }
    }
}

const STEPS_PER_BAR: u32 = 16;
const BARS: u32 = 4;
const MIN_EVENTS_PER_BAR: usize = 4;
const MAX_EVENTS_PER_BAR: usize = 32;

struct Builder<'a> {
    rng: ChaCha8Rng,
    mix: &'a StyleMix,
    bar: Vec<DrumEvent>,
}

impl Builder<'_> {
    fn hit(&mut self, inst: Instrument, step: u32, p: f64, vel: (f64, f64)) {
        let w = self.mix.weight(inst);
        if w <= 0.0 {
            return;
        }
        if self.rng.random::<f64>() < (p * w).min(1.0) {
            let velocity = self.rng.random_range(vel.0..vel.1);
            self.bar.push(DrumEvent {
                instrument: inst,
                step,
                velocity,
            });
        }
    }
}

fn dedup(events: &mut Vec<DrumEvent>) {
    events.sort_by(|a, b| {
        (a.step, a.instrument.index()).cmp(&(b.step, b.instrument.index()))
    });
    events.dedup_by(|a, b| a.step == b.step && a.instrument == b.instrument);
}

/// One-bar groove: kick anchored on the downbeat, backbeat snare, a hi-hat
/// ostinato and a few random syncopations.
fn base_bar(b: &mut Builder<'_>) {
    use Instrument::*;
    b.hit(Kick, 0, 0.95, (0.85, 1.0));
    b.hit(Kick, 8, 0.55, (0.7, 0.95));
    for step in [2u32, 3, 6, 7, 10, 11, 14, 15] {
        b.hit(Kick, step, 0.12, (0.5, 0.85));
    }
    b.hit(Snare, 4, 0.9, (0.75, 1.0));
    b.hit(Snare, 12, 0.9, (0.75, 1.0));
    for step in [1u32, 5, 7, 9, 13, 15] {
        b.hit(Snare, step, 0.06, (0.2, 0.4));
    }
    let hat_every = match b.rng.random_range(0..3) {
        0 => 1,
        1 => 2,
        _ => 4,
    };
    for step in (0..STEPS_PER_BAR).step_by(hat_every) {
        let accent = if step % 4 == 0 { (0.55, 0.75) } else { (0.3, 0.55) };
        b.hit(Hihat, step, 0.95, accent);
    }
}

/// Generates `count` four-bar patterns; pattern `i` only depends on
/// `(seed, i)`.
pub fn generate_patterns(seed: u64, count: usize, mix: &StyleMix) -> Vec<DrumPattern> {
    (0..count).map(|i| generate_one(seed, i, mix)).collect()
}

fn generate_one(seed: u64, index: usize, mix: &StyleMix) -> DrumPattern {
    use Instrument::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let tempo = rng.random_range(mix.tempo_range.0..mix.tempo_range.1);
    let mut b = Builder {
        rng,
        mix,
        bar: Vec::new(),
    };
    base_bar(&mut b);
    let base = std::mem::take(&mut b.bar);

    let mut events = Vec::new();
    let fill_bar = b.rng.random::<f64>() < 0.5;
    for bar in 0..BARS {
        let offset = bar * STEPS_PER_BAR;
        b.bar.clear();
        for e in &base {
            let in_fill = fill_bar && bar == BARS - 1 && e.step >= 12;
            if in_fill || b.rng.random::<f64>() < 0.05 {
                continue;
            }
            b.bar.push(*e);
        }
        if bar == 0 {
            b.hit(Crash, 0, 0.6, (0.8, 1.0));
        }
        if fill_bar && bar == BARS - 1 {
            for step in 12..16 {
                b.hit(Tom, step, 0.6, (0.6, 0.9));
                b.hit(Snare, step, 0.25, (0.5, 0.8));
            }
        }
        for step in 1..STEPS_PER_BAR {
            b.hit(Kick, step, 0.02, (0.5, 0.8));
        }
        let mut bar_events = std::mem::take(&mut b.bar);
        dedup(&mut bar_events);
        while bar_events.len() > MAX_EVENTS_PER_BAR {
            let i = b.rng.random_range(0..bar_events.len());
            bar_events.remove(i);
        }
        if bar_events.len() < MIN_EVENTS_PER_BAR {
            // Sparse grooves get a quarter-note pulse on whatever instrument
            // the mix allows.
            let pulse = [Hihat, Kick, Snare, Tom, Crash]
                .into_iter()
                .find(|&i| mix.weight(i) > 0.0);
            if let Some(inst) = pulse {
                for step in [0u32, 4, 8, 12] {
                    bar_events.push(DrumEvent {
                        instrument: inst,
                        step,
                        velocity: 0.5,
                    });
                }
                dedup(&mut bar_events);
            }
        }
        events.extend(bar_events.into_iter().map(|mut e| {
            e.step += offset;
            e
        }));
    }
    DrumPattern {
        id: format!("gen{seed}-{index:04}"),
        grid_resolution: 4,
        beats_per_bar: 4,
        bars: BARS,
        events,
        original_tempo: tempo,
    }
}

/// Sixteen bundled one-bar rhythms: `(name, bpm, [kick, snare, hihat, tom,
/// crash])`, one character per sixteenth, `x` loud, `o` soft.
const CANONICAL: [(&str, f64, [&str; 5]); 16] = [
    ("rock", 120.0, ["x.......x.......", "....x.......x...", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("rock16", 110.0, ["x.......x.x.....", "....x.......x...", "xxxxxxxxxxxxxxxx", "................", "................"]),
    ("halftime", 90.0, ["x.........x.....", "........x.......", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("disco", 124.0, ["x...x...x...x...", "....x.......x...", "..x...x...x...x.", "................", "................"]),
    ("funk", 100.0, ["x..x..x...x..x..", "....x..o.o..x..o", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("shuffle", 105.0, ["x.....x.x.......", "....x.......x...", "x..xx..xx..xx..x", "................", "................"]),
    ("samba", 100.0, ["x..xx..xx..xx..x", "..o...o...o...o.", "xxxxxxxxxxxxxxxx", "................", "................"]),
    ("bossa", 130.0, ["x..xx..xx..xx..x", "x..x..x...x..x..", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("reggae", 80.0, ["........x.......", "........x.......", "..x...x...x...x.", "................", "................"]),
    ("hiphop", 92.0, ["x.....x...x.....", "....x.......x...", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("breakbeat", 135.0, ["x.x.......x.....", "....x..o.o..x...", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("motown", 115.0, ["x.......x.......", "x...x...x...x...", "x.x.x.x.x.x.x.x.", "................", "................"]),
    ("tomgroove", 112.0, ["x.......x.......", "....x.......x...", "................", "x..x..x.x..x..x.", "................"]),
    ("crashride", 128.0, ["x.......x.......", "....x.......x...", "x.x.x.x.x.x.x.x.", "................", "x..............."]),
    ("afro", 110.0, ["x.....x...x.....", "...o..x.....x...", "x.xx.xx.x.xx.xx.", "..........x.....", "................"]),
    ("march", 118.0, ["x.......x.......", "o.oox.o.o.oox.o.", "................", "................", "x..............."]),
];

/// The bundled rhythms as four-bar patterns (crash on the first downbeat, tom
/// fill on the last beat).
pub fn canonical_patterns() -> Vec<DrumPattern> {
    CANONICAL
        .iter()
        .map(|(name, bpm, rows)| {
            let mut events = Vec::new();
            for bar in 0..BARS {
                let offset = bar * STEPS_PER_BAR;
                for (inst, row) in Instrument::ALL.iter().zip(rows.iter()) {
                    for (step, ch) in row.chars().enumerate() {
                        let step = step as u32;
                        if bar == BARS - 1 && step >= 12 && *inst != Instrument::Kick {
                            continue;
                        }
                        let velocity = match ch {
                            'x' => 0.9,
                            'o' => 0.4,
                            _ => continue,
                        };
                        events.push(DrumEvent {
                            instrument: *inst,
                            step: offset + step,
                            velocity,
                        });
                    }
                }
                if bar == 0 && !rows[4].starts_with('x') {
                    events.push(DrumEvent {
                        instrument: Instrument::Crash,
                        step: 0,
                        velocity: 0.8,
                    });
                }
                if bar == BARS - 1 {
                    for step in [12u32, 13, 14, 15] {
                        events.push(DrumEvent {
                            instrument: Instrument::Tom,
                            step: offset + step,
                            velocity: 0.7,
                        });
                    }
                }
            }
            dedup(&mut events);
            DrumPattern {
                id: format!("canon-{name}"),
                grid_resolution: 4,
                beats_per_bar: 4,
                bars: BARS,
                events,
                original_tempo: *bpm,
            }
        })
        .collect()
}

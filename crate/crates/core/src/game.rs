//! Card-task mechanics: censoring probabilities, the observation kernel
//! `Pr(Y = y, C = c | Z = z)`, single-round simulation and round payoffs.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::MAX_CARDS;
use crate::error::{CmmError, Result};

/// Points per win card.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GainAmount {
    Ten,
    Thirty,
}

/// Points lost when a loss card is turned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossAmount {
    L250,
    L750,
}

/// Number of loss cards hidden among the 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossCards {
    One,
    Three,
}

impl GainAmount {
    pub fn points(self) -> i64 {
        match self {
            GainAmount::Ten => 10,
            GainAmount::Thirty => 30,
        }
    }
}

impl LossAmount {
    pub fn points(self) -> i64 {
        match self {
            LossAmount::L250 => 250,
            LossAmount::L750 => 750,
        }
    }
}

impl LossCards {
    pub fn count(self) -> u32 {
        match self {
            LossCards::One => 1,
            LossCards::Three => 3,
        }
    }
}

/// One of the eight experimental conditions shown to the participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GameSetting {
    pub gain: GainAmount,
    pub loss: LossAmount,
    pub cards: LossCards,
}

impl GameSetting {
    /// Build from raw point values; only the eight task conditions are accepted.
    pub fn from_values(gain: i64, loss: i64, n_loss_cards: i64) -> Result<Self> {
        let gain = match gain {
            10 => GainAmount::Ten,
            30 => GainAmount::Thirty,
            g => return Err(CmmError::OutOfRange(format!("gain amount {g} not in {{10, 30}}"))),
        };
        let loss = match loss {
            250 => LossAmount::L250,
            750 => LossAmount::L750,
            l => {
                return Err(CmmError::OutOfRange(format!(
                    "loss amount {l} not in {{250, 750}}"
                )))
            }
        };
        let cards = match n_loss_cards {
            1 => LossCards::One,
            3 => LossCards::Three,
            n => return Err(CmmError::OutOfRange(format!("loss cards {n} not in {{1, 3}}"))),
        };
        Ok(GameSetting { gain, loss, cards })
    }

    /// The eight settings, gain-major then loss amount then loss cards.
    pub fn all() -> [GameSetting; 8] {
        let mut out = [GameSetting {
            gain: GainAmount::Ten,
            loss: LossAmount::L250,
            cards: LossCards::One,
        }; 8];
        let mut i = 0;
        for gain in [GainAmount::Ten, GainAmount::Thirty] {
            for loss in [LossAmount::L250, LossAmount::L750] {
                for cards in [LossCards::One, LossCards::Three] {
                    out[i] = GameSetting { gain, loss, cards };
                    i += 1;
                }
            }
        }
        out
    }

    pub fn n_loss_cards(&self) -> u32 {
        self.cards.count()
    }

    /// Last card index at which the round can still be running.
    pub fn last_reachable_card(&self) -> u32 {
        MAX_CARDS + 1 - self.n_loss_cards()
    }
}

impl fmt::Display for GameSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(gain {}, loss {}, {} loss card{})",
            self.gain.points(),
            self.loss.points(),
            self.n_loss_cards(),
            if self.n_loss_cards() == 1 { "" } else { "s" }
        )
    }
}

/// Probability that card `k` is a loss card given cards `1..k` were safe.
pub fn conditional_censor_prob(k: u32, s: GameSetting) -> Result<f64> {
    if k < 1 || k > s.last_reachable_card() {
        return Err(CmmError::OutOfRange(format!(
            "card index {k} outside 1..={} for {s}",
            s.last_reachable_card()
        )));
    }
    Ok(f64::from(s.n_loss_cards()) / f64::from(MAX_CARDS + 1 - k))
}

/// Probability that the first `k` cards are all safe; zero once fewer safe
/// cards exist than `k`.
pub fn survival_prob(k: u32, s: GameSetting) -> f64 {
    let n = s.n_loss_cards();
    if k > MAX_CARDS - n {
        return 0.0;
    }
    (0..k)
        .map(|j| f64::from(MAX_CARDS - n - j) / f64::from(MAX_CARDS - j))
        .product()
}

/// Unconditional probability that a round which would run through all cards
/// ends at card `k`.
pub fn marginal_censor_prob(k: u32, s: GameSetting) -> Result<f64> {
    if !(1..=MAX_CARDS).contains(&k) {
        return Err(CmmError::OutOfRange(format!("card index {k} outside 1..=32")));
    }
    Ok(match s.cards {
        LossCards::One => 1.0 / 32.0,
        LossCards::Three => {
            let k = f64::from(k);
            (3.0 * (32.0 - k) * (31.0 - k) / (32.0 * 31.0 * 30.0)).max(0.0)
        }
    })
}

/// Observation kernel `Pr(Y = y, C = censored | Z = z)` for setting `s`.
pub fn omega(y: u32, censored: bool, z: u32, s: GameSetting) -> Result<f64> {
    if y > MAX_CARDS || z > MAX_CARDS {
        return Err(CmmError::OutOfRange(format!(
            "y={y}, z={z} must lie in 0..=32"
        )));
    }
    let on_pattern = if censored { y >= 1 && z >= y } else { z == y };
    Ok(if on_pattern { omega_at(y, censored, s) } else { 0.0 })
}

/// The kernel value on its non-zero pattern; independent of `z`.
pub fn omega_at(y: u32, censored: bool, s: GameSetting) -> f64 {
    if censored {
        if y == 0 || y > s.last_reachable_card() {
            return 0.0;
        }
        survival_prob(y - 1, s) * f64::from(s.n_loss_cards()) / f64::from(MAX_CARDS + 1 - y)
    } else {
        survival_prob(y, s)
    }
}

/// Result of one simulated round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    /// Cards turned, including the loss card when censored.
    pub y: u32,
    pub censored: bool,
    pub score: i64,
    /// Intended card count.
    pub z_true: u32,
}

/// Points scored when the round ends after `y` cards.
pub fn round_score(y: u32, censored: bool, s: GameSetting) -> i64 {
    if censored {
        s.gain.points() * i64::from(y - 1) - s.loss.points()
    } else {
        s.gain.points() * i64::from(y)
    }
}

/// Play one round: the loss cards are placed uniformly among the 32 cards and
/// the participant turns cards in order until `z_intended` or a loss card.
pub fn simulate_trial<R: Rng + ?Sized>(z_intended: u32, s: GameSetting, rng: &mut R) -> TrialOutcome {
    let z = z_intended.min(MAX_CARDS);
    let first_loss = sample(rng, MAX_CARDS as usize, s.n_loss_cards() as usize)
        .into_iter()
        .min()
        .expect("at least one loss card") as u32
        + 1;
    if first_loss <= z {
        TrialOutcome {
            y: first_loss,
            censored: true,
            score: round_score(first_loss, true, s),
            z_true: z,
        }
    } else {
        TrialOutcome {
            y: z,
            censored: false,
            score: round_score(z, false, s),
            z_true: z,
        }
    }
}

/// Expected round score when intending to turn `z` cards.
pub fn expected_score(z: u32, s: GameSetting) -> f64 {
    let censored: f64 = (1..=z.min(MAX_CARDS))
        .map(|k| omega_at(k, true, s) * round_score(k, true, s) as f64)
        .sum();
    censored + survival_prob(z, s) * round_score(z, false, s) as f64
}

/// Intended card count maximizing the expected score; ties go to fewer cards.
pub fn risk_neutral_optimum(s: GameSetting) -> u32 {
    let mut best = 0;
    let mut best_value = expected_score(0, s);
    for z in 1..=MAX_CARDS {
        let v = expected_score(z, s);
        if v > best_value + 1e-12 {
            best = z;
            best_value = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setting(gain: i64, loss: i64, n: i64) -> GameSetting {
        GameSetting::from_values(gain, loss, n).unwrap()
    }

    /// Every placement of the loss cards, as sorted position lists (1-based).
    fn placements(n: u32) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        match n {
            1 => (1..=32).for_each(|a| out.push(vec![a])),
            3 => {
                for a in 1..=32 {
                    for b in a + 1..=32 {
                        for c in b + 1..=32 {
                            out.push(vec![a, b, c]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        out
    }

    #[test]
    fn eight_settings() {
        let all = GameSetting::all();
        let unique: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 8);
        assert!(GameSetting::from_values(20, 250, 1).is_err());
        assert!(GameSetting::from_values(10, 500, 1).is_err());
        assert!(GameSetting::from_values(10, 250, 2).is_err());
    }

    #[test]
    fn conditional_probabilities() {
        assert_eq!(conditional_censor_prob(32, setting(10, 250, 1)).unwrap(), 1.0);
        assert_abs_diff_eq!(
            conditional_censor_prob(1, setting(10, 250, 3)).unwrap(),
            3.0 / 32.0,
            epsilon = 1e-16
        );
        assert!(conditional_censor_prob(31, setting(10, 250, 3)).is_err());
        assert!(conditional_censor_prob(0, setting(10, 250, 1)).is_err());
    }

    #[test]
    fn conditional_matches_enumeration() {
        let s = setting(10, 250, 1);
        let all = placements(1);
        let reached: Vec<_> = all.iter().filter(|p| p[0] >= 5).collect();
        let hit = reached.iter().filter(|p| p[0] == 5).count();
        assert_abs_diff_eq!(
            conditional_censor_prob(5, s).unwrap(),
            hit as f64 / reached.len() as f64,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(conditional_censor_prob(5, s).unwrap(), 1.0 / 28.0, epsilon = 1e-15);
    }

    #[test]
    fn marginal_closed_forms() {
        let three = setting(30, 750, 3);
        assert_eq!(marginal_censor_prob(1, three).unwrap(), 3.0 / 32.0);
        assert_abs_diff_eq!(
            marginal_censor_prob(2, three).unwrap(),
            29.0 / 32.0 * 3.0 / 31.0,
            epsilon = 1e-16
        );
        for k in 1..=32 {
            assert_eq!(marginal_censor_prob(k, setting(10, 250, 1)).unwrap(), 1.0 / 32.0);
        }
        assert_eq!(marginal_censor_prob(32, three).unwrap(), 0.0);
        assert!(marginal_censor_prob(0, three).is_err());
    }

    #[test]
    fn marginal_equals_product_of_conditionals() {
        for s in [setting(10, 250, 1), setting(10, 250, 3)] {
            for k in 1..=s.last_reachable_card() {
                let mut surv = 1.0;
                for j in 1..k {
                    surv *= 1.0 - conditional_censor_prob(j, s).unwrap();
                }
                let prod = surv * conditional_censor_prob(k, s).unwrap();
                assert_abs_diff_eq!(marginal_censor_prob(k, s).unwrap(), prod, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn marginals_plus_survival_sum_to_one() {
        for s in [setting(10, 250, 1), setting(10, 250, 3)] {
            let total: f64 = (1..=32).map(|k| marginal_censor_prob(k, s).unwrap()).sum::<f64>()
                + survival_prob(32, s);
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn omega_table_entries() {
        let s = setting(30, 750, 1);
        assert_eq!(omega(0, false, 0, s).unwrap(), 1.0);
        assert_abs_diff_eq!(omega(2, true, 5, s).unwrap(), 1.0 / 32.0, epsilon = 1e-16);
        assert_eq!(omega(3, false, 7, s).unwrap(), 0.0);
        assert_eq!(omega(0, true, 4, s).unwrap(), 0.0);
        assert_eq!(omega(32, false, 32, s).unwrap(), 0.0);
    }

    #[test]
    fn omega_structural_zeros() {
        for s in [setting(10, 250, 1), setting(10, 250, 3)] {
            for y in 0..=32 {
                for z in 0..=32 {
                    let unc = omega(y, false, z, s).unwrap();
                    if z != y {
                        assert_eq!(unc, 0.0);
                    }
                    let cen = omega(y, true, z, s).unwrap();
                    if z < y || y == 0 {
                        assert_eq!(cen, 0.0);
                    } else {
                        assert_eq!(cen, omega_at(y, true, s));
                    }
                }
            }
            // for each intended count the kernel is a distribution over (y, c)
            for z in 0..=32 {
                let total: f64 = (0..=32)
                    .flat_map(|y| [false, true].map(|c| omega(y, c, z, s).unwrap()))
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn simulate_trial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = setting(30, 750, 1);
        for _ in 0..100 {
            let out = simulate_trial(0, s, &mut rng);
            assert_eq!(out, TrialOutcome { y: 0, censored: false, score: 0, z_true: 0 });
        }
        assert_eq!(round_score(10, false, s), 300);
        assert_eq!(round_score(11, true, s), -450);
        for _ in 0..1000 {
            let out = simulate_trial(32, s, &mut rng);
            assert!(out.censored);
        }
    }

    #[test]
    fn censoring_position_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200_000;
        for s in [setting(10, 250, 1), setting(10, 250, 3)] {
            let mut counts = [0usize; 33];
            for _ in 0..n {
                let out = simulate_trial(32, s, &mut rng);
                assert!(out.censored);
                counts[out.y as usize] += 1;
            }
            for k in 1..=32u32 {
                let p = marginal_censor_prob(k, s).unwrap();
                let f = counts[k as usize] as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((f - p).abs() <= 3.5 * se + 1e-12, "k={k}: {f} vs {p}");
            }
        }
    }

    #[test]
    fn risk_neutral_table() {
        // (10, 250, 1) has an exact tie between 6 and 7 cards; the tie rule
        // picks 6.
        let tied = setting(10, 250, 1);
        assert_abs_diff_eq!(expected_score(6, tied), 6.5625, epsilon = 1e-12);
        assert_abs_diff_eq!(expected_score(7, tied), 6.5625, epsilon = 1e-12);
        let expect = [
            ((10, 250, 1), 6),
            ((10, 750, 1), 0),
            ((30, 250, 1), 23),
            ((30, 750, 1), 6),
            ((10, 250, 3), 0),
            ((10, 750, 3), 0),
            ((30, 250, 3), 4),
            ((30, 750, 3), 0),
        ];
        for ((g, l, n), z) in expect {
            assert_eq!(risk_neutral_optimum(setting(g, l, n)), z, "setting ({g},{l},{n})");
        }
    }

    #[test]
    fn expected_score_matches_enumeration() {
        for s in GameSetting::all() {
            let all = placements(s.n_loss_cards());
            for z in 0..=32u32 {
                let brute: f64 = all
                    .iter()
                    .map(|p| {
                        if p[0] <= z {
                            round_score(p[0], true, s) as f64
                        } else {
                            round_score(z, false, s) as f64
                        }
                    })
                    .sum::<f64>()
                    / all.len() as f64;
                assert_abs_diff_eq!(expected_score(z, s), brute, epsilon = 1e-9);
            }
        }
    }
}

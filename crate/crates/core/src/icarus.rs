// SPDX-License-Identifier: Apache-2.0

//! Windowed no-fly-zone invasion detection for a single receiver.
//!
//! The detector listens for broadcasts and renders one verdict per detection
//! window. A window opens on the first message after a reset and spans
//! `[t0, t0 + W]` in message time. A single reported position strictly
//! inside the no-fly radius yields `Invasion` immediately, and that verdict
//! holds for the rest of the window. A window that runs out without such a
//! report yields `NotInvasion`. While the channel is silent the detector
//! still renders `NotInvasion` every `W`, anchored at the listening start.
//!
//! With `guessing` enabled, reports farther than the reception range are
//! treated as unreliable and replaced by a straight-line extrapolation from
//! the sender's previous fix, or by a projection onto the reception sphere
//! when there is no previous fix.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::geo::{to_enu, EnuPosition, GeoPosition};
use crate::messages::RemoteIdMessage;

/// Upper bound on the detection window, in seconds.
pub const W_MAX_S: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("message at {t_us} us precedes the current window start {start_us} us")]
    OutOfOrder { t_us: u64, start_us: u64 },
    #[error("message at {t_us} us arrives after the window deadline {deadline_us} us; close the window first")]
    WindowExpired { t_us: u64, deadline_us: u64 },
    #[error("window not yet elapsed: now {now_us} us, deadline {deadline_us} us")]
    Timing { now_us: u64, deadline_us: u64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectorConfig {
    receiver: GeoPosition,
    delta_m: f64,
    r_max_m: f64,
    window_s: f64,
    guessing: bool,
}

impl DetectorConfig {
    pub fn new(
        receiver: GeoPosition,
        delta_m: f64,
        r_max_m: f64,
        window_s: f64,
        guessing: bool,
    ) -> Result<Self, DetectorError> {
        if !(delta_m.is_finite() && delta_m > 0.0) {
            return Err(DetectorError::Config(format!("delta must be > 0, got {delta_m}")));
        }
        if !(r_max_m.is_finite() && delta_m <= r_max_m) {
            return Err(DetectorError::Config(format!(
                "delta {delta_m} m must not exceed the reception range {r_max_m} m"
            )));
        }
        if !(window_s.is_finite() && window_s > 0.0 && window_s <= W_MAX_S) {
            return Err(DetectorError::Config(format!(
                "window {window_s} s not in (0, {W_MAX_S}]"
            )));
        }
        if (window_s * 1e6).round() < 1.0 {
            return Err(DetectorError::Config("window shorter than 1 us".into()));
        }
        Ok(DetectorConfig { receiver, delta_m, r_max_m, window_s, guessing })
    }

    pub fn receiver(&self) -> GeoPosition {
        self.receiver
    }

    pub fn delta_m(&self) -> f64 {
        self.delta_m
    }

    pub fn r_max_m(&self) -> f64 {
        self.r_max_m
    }

    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    pub fn window_us(&self) -> u64 {
        (self.window_s * 1e6).round() as u64
    }

    pub fn guessing(&self) -> bool {
        self.guessing
    }
}

/// What the detector sees of one received broadcast.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    /// Caller-side index, echoed back as the triggering message.
    pub index: usize,
    pub pseudonym: &'a str,
    pub t_us: u64,
    pub position: GeoPosition,
    pub velocity: [f64; 3],
}

impl<'a> Observation<'a> {
    pub fn from_message(index: usize, msg: &'a RemoteIdMessage) -> Self {
        Observation {
            index,
            pseudonym: msg.pseudonym(),
            t_us: msg.timestamp_us(),
            position: msg.position(),
            velocity: msg.velocity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Invasion,
    NotInvasion,
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DetectionOutcome {
    pub verdict: Verdict,
    /// Index of the message that triggered an `Invasion`.
    pub trigger: Option<usize>,
    pub decision_time_us: u64,
    pub window_start_us: u64,
    /// True when this outcome closed the window.
    pub window_closed: bool,
}

/// A closed window and its final verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowSummary {
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub verdict: Verdict,
    pub trigger_index: Option<usize>,
    /// When `Invasion` was first rendered in this window.
    pub invasion_time_us: Option<u64>,
    pub message_count: usize,
    /// Indices of the messages assigned to this window, in arrival order.
    #[serde(skip)]
    pub message_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetEvent {
    pub t_us: u64,
    pub invasion: bool,
}

/// Last position used for a sender, for the guessing strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    pub t_us: u64,
    pub position: EnuPosition,
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Default)]
pub struct DetectorState {
    pub window_open: bool,
    pub window_start_us: u64,
    pub det_events: Vec<DetEvent>,
    pub last_fix: HashMap<String, Fix>,
    idle_since_us: u64,
    latched: Option<(usize, u64)>,
    indices: Vec<usize>,
}

/// Guesses where a sender is when its report lies beyond the reception
/// range. With a previous fix, assumes straight motion at the mean of the
/// two reported velocities. Without one, projects the report onto the
/// reception sphere along the same bearing.
pub fn extrapolate_position(
    prev: Option<&Fix>,
    reported: &EnuPosition,
    t_us: u64,
    velocity: [f64; 3],
    config: &DetectorConfig,
) -> Result<EnuPosition, DetectorError> {
    match prev {
        Some(p) => {
            if t_us <= p.t_us {
                return Err(DetectorError::Degenerate(format!(
                    "no time elapsed since the previous fix at {} us",
                    p.t_us
                )));
            }
            let dt = (t_us - p.t_us) as f64 / 1e6;
            let mean = |i: usize| 0.5 * (p.velocity[i] + velocity[i]);
            Ok(EnuPosition::new(
                p.position.x_m + mean(0) * dt,
                p.position.y_m + mean(1) * dt,
                p.position.z_m + mean(2) * dt,
            ))
        }
        None => {
            let d = reported.norm();
            if d == 0.0 || !d.is_finite() {
                return Err(DetectorError::Degenerate("report has no bearing".into()));
            }
            let k = config.r_max_m / d;
            Ok(EnuPosition::new(reported.x_m * k, reported.y_m * k, reported.z_m * k))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    state: DetectorState,
    closed: Vec<WindowSummary>,
}

impl Detector {
    pub fn new(config: DetectorConfig, listen_start_us: u64) -> Self {
        let state = DetectorState { idle_since_us: listen_start_us, ..Default::default() };
        Detector { config, state, closed: Vec::new() }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    /// Time at which the current window (or idle period) expires.
    pub fn deadline_us(&self) -> u64 {
        let base = if self.state.window_open {
            self.state.window_start_us
        } else {
            self.state.idle_since_us
        };
        base.saturating_add(self.config.window_us())
    }

    /// Distance of a report from the receiver, after guessing if enabled.
    fn evaluate(&mut self, obs: &Observation<'_>) -> Result<f64, DetectorError> {
        let reported = to_enu(&obs.position, &self.config.receiver);
        let mut used = reported;
        if self.config.guessing && reported.norm() > self.config.r_max_m {
            let prev = self.state.last_fix.get(obs.pseudonym);
            used = extrapolate_position(prev, &reported, obs.t_us, obs.velocity, &self.config)?;
        }
        if self.config.guessing {
            self.state.last_fix.insert(
                obs.pseudonym.to_string(),
                Fix { t_us: obs.t_us, position: used, velocity: obs.velocity },
            );
        }
        Ok(used.norm())
    }

    pub fn on_message(
        &mut self,
        index: usize,
        msg: &RemoteIdMessage,
    ) -> Result<DetectionOutcome, DetectorError> {
        self.on_observation(&Observation::from_message(index, msg))
    }

    pub fn on_observation(
        &mut self,
        obs: &Observation<'_>,
    ) -> Result<DetectionOutcome, DetectorError> {
        let t = obs.t_us;
        if self.state.window_open {
            if t < self.state.window_start_us {
                return Err(DetectorError::OutOfOrder {
                    t_us: t,
                    start_us: self.state.window_start_us,
                });
            }
            if t > self.deadline_us() {
                return Err(DetectorError::WindowExpired { t_us: t, deadline_us: self.deadline_us() });
            }
        } else if t < self.state.idle_since_us {
            return Err(DetectorError::OutOfOrder { t_us: t, start_us: self.state.idle_since_us });
        }

        let d = self.evaluate(obs)?;

        if !self.state.window_open {
            self.state.window_open = true;
            self.state.window_start_us = t;
            self.state.det_events.clear();
            self.state.indices.clear();
            self.state.latched = None;
        }
        let start = self.state.window_start_us;
        let hit = d < self.config.delta_m;
        self.state.det_events.push(DetEvent { t_us: t, invasion: hit });
        self.state.indices.push(obs.index);
        if hit && self.state.latched.is_none() {
            self.state.latched = Some((obs.index, t));
        }

        let expired = t - start >= self.config.window_us();
        let outcome = match self.state.latched {
            Some((idx, _)) => DetectionOutcome {
                verdict: Verdict::Invasion,
                trigger: Some(idx),
                decision_time_us: t,
                window_start_us: start,
                window_closed: expired,
            },
            None => DetectionOutcome {
                verdict: if expired { Verdict::NotInvasion } else { Verdict::Pending },
                trigger: None,
                decision_time_us: t,
                window_start_us: start,
                window_closed: expired,
            },
        };
        if expired {
            self.close(start + self.config.window_us());
        }
        Ok(outcome)
    }

    /// Renders the verdict for a window (or idle period) whose deadline has
    /// passed.
    pub fn on_window_elapsed(&mut self, now_us: u64) -> Result<DetectionOutcome, DetectorError> {
        let deadline = self.deadline_us();
        if now_us < deadline {
            return Err(DetectorError::Timing { now_us, deadline_us: deadline });
        }
        if self.state.window_open {
            let start = self.state.window_start_us;
            let summary = self.close(deadline);
            return Ok(DetectionOutcome {
                verdict: summary.verdict,
                trigger: summary.trigger_index,
                decision_time_us: deadline,
                window_start_us: start,
                window_closed: true,
            });
        }
        let start = self.state.idle_since_us;
        self.closed.push(WindowSummary {
            window_start_us: start,
            window_end_us: deadline,
            verdict: Verdict::NotInvasion,
            trigger_index: None,
            invasion_time_us: None,
            message_count: 0,
            message_indices: Vec::new(),
        });
        self.state.idle_since_us = deadline;
        Ok(DetectionOutcome {
            verdict: Verdict::NotInvasion,
            trigger: None,
            decision_time_us: deadline,
            window_start_us: start,
            window_closed: true,
        })
    }

    /// Closes an open window early, e.g. at the end of a trace.
    pub fn flush(&mut self, now_us: u64) -> Option<WindowSummary> {
        if !self.state.window_open {
            return None;
        }
        let end = now_us.clamp(self.state.window_start_us, self.deadline_us());
        Some(self.close(end))
    }

    fn close(&mut self, end_us: u64) -> WindowSummary {
        let st = &mut self.state;
        let summary = WindowSummary {
            window_start_us: st.window_start_us,
            window_end_us: end_us,
            verdict: if st.latched.is_some() { Verdict::Invasion } else { Verdict::NotInvasion },
            trigger_index: st.latched.map(|l| l.0),
            invasion_time_us: st.latched.map(|l| l.1),
            message_count: st.det_events.len(),
            message_indices: std::mem::take(&mut st.indices),
        };
        st.window_open = false;
        st.det_events.clear();
        st.latched = None;
        st.idle_since_us = end_us;
        self.closed.push(summary.clone());
        summary
    }

    /// Closed windows since the last call, oldest first.
    pub fn drain_windows(&mut self) -> Vec<WindowSummary> {
        std::mem::take(&mut self.closed)
    }
}

/// Result of replaying a time-ordered stream through one detector.
#[derive(Debug, Clone, Default)]
pub struct Replay {
    pub outcomes: Vec<DetectionOutcome>,
    pub windows: Vec<WindowSummary>,
}

/// Feeds observations in order, firing window deadlines as the message clock
/// passes them. With `end_us`, idle deadlines up to the end are fired and a
/// still-open window is closed at the end.
pub fn replay<'a, I>(
    config: DetectorConfig,
    listen_start_us: u64,
    observations: I,
    end_us: Option<u64>,
) -> Result<Replay, DetectorError>
where
    I: IntoIterator<Item = Observation<'a>>,
{
    let mut det = Detector::new(config, listen_start_us);
    let mut out = Replay::default();
    for obs in observations {
        while det.deadline_us() < obs.t_us {
            let d = det.deadline_us();
            out.outcomes.push(det.on_window_elapsed(d)?);
        }
        out.outcomes.push(det.on_observation(&obs)?);
    }
    if let Some(end) = end_us {
        while det.deadline_us() <= end {
            let d = det.deadline_us();
            out.outcomes.push(det.on_window_elapsed(d)?);
        }
        det.flush(end);
    }
    out.windows = det.drain_windows();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::from_enu;
    use Verdict::Invasion;

    const W: u64 = 15_000_000;

    fn receiver() -> GeoPosition {
        GeoPosition::new(45.0, 9.0, 0.0).unwrap()
    }

    fn config(guessing: bool) -> DetectorConfig {
        DetectorConfig::new(receiver(), 700.0, 705.0, 15.0, guessing).unwrap()
    }

    fn at(x: f64, y: f64) -> GeoPosition {
        from_enu(&EnuPosition::new(x, y, 0.0), &receiver()).unwrap()
    }

    fn obs(index: usize, t_us: u64, position: GeoPosition) -> Observation<'static> {
        Observation { index, pseudonym: "p", t_us, position, velocity: [0.0; 3] }
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::new(receiver(), 0.0, 705.0, 15.0, false).is_err());
        assert!(DetectorConfig::new(receiver(), 710.0, 705.0, 15.0, false).is_err());
        assert!(DetectorConfig::new(receiver(), 705.0, 705.0, 15.0, false).is_ok());
        assert!(DetectorConfig::new(receiver(), 700.0, 705.0, 0.0, false).is_err());
        assert!(DetectorConfig::new(receiver(), 700.0, 705.0, W_MAX_S + 1.0, false).is_err());
    }

    #[test]
    fn close_report_is_an_immediate_invasion() {
        let mut d = Detector::new(config(false), 0);
        let out = d.on_observation(&obs(0, 1_000, at(300.0, 0.0))).unwrap();
        assert_eq!(out.verdict, Verdict::Invasion);
        assert_eq!(out.trigger, Some(0));
        assert!(d.state().window_open);
        assert_eq!(d.state().det_events, vec![DetEvent { t_us: 1_000, invasion: true }]);
    }

    #[test]
    fn shell_report_waits_for_the_window() {
        let mut d = Detector::new(config(false), 0);
        let out = d.on_observation(&obs(0, 0, at(704.0, 0.0))).unwrap();
        assert_eq!(out.verdict, Verdict::Pending);
        let out = d.on_observation(&obs(1, W, at(704.0, 0.0))).unwrap();
        assert_eq!(out.verdict, Verdict::NotInvasion);
        assert!(out.window_closed);
        assert!(!d.state().window_open && d.state().det_events.is_empty());
        let w = d.drain_windows();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].message_count, 2);
    }

    #[test]
    fn invasion_latches_for_the_rest_of_the_window() {
        let mut d = Detector::new(config(false), 0);
        d.on_observation(&obs(0, 0, at(10.0, 0.0))).unwrap();
        let out = d.on_observation(&obs(1, 1_000_000, at(1000.0, 0.0))).unwrap();
        assert_eq!(out.verdict, Verdict::Invasion);
        assert_eq!(out.trigger, Some(0));
        let out = d.on_window_elapsed(W).unwrap();
        assert_eq!(out.verdict, Verdict::Invasion);
        let w = d.drain_windows();
        assert_eq!(w[0].invasion_time_us, Some(0));
        assert_eq!(w[0].message_indices, vec![0, 1]);
    }

    #[test]
    fn idle_channel_yields_not_invasion_every_window() {
        let mut d = Detector::new(config(false), 100);
        assert!(matches!(d.on_window_elapsed(100 + W - 1), Err(DetectorError::Timing { .. })));
        assert_eq!(d.on_window_elapsed(100 + W).unwrap().verdict, Verdict::NotInvasion);
        assert_eq!(d.deadline_us(), 100 + 2 * W);
        // A fresh window anchors at the next message.
        d.on_observation(&obs(0, 100 + W + 5, at(800.0, 0.0))).unwrap();
        assert_eq!(d.state().window_start_us, 100 + W + 5);
        assert_eq!(d.deadline_us(), 100 + 2 * W + 5);
    }

    #[test]
    fn ordering_errors_leave_state_untouched() {
        let mut d = Detector::new(config(false), 0);
        d.on_observation(&obs(0, 5_000, at(800.0, 0.0))).unwrap();
        let before = d.state().det_events.clone();
        assert!(matches!(
            d.on_observation(&obs(1, 4_000, at(0.0, 0.0))),
            Err(DetectorError::OutOfOrder { .. })
        ));
        assert!(matches!(
            d.on_observation(&obs(1, 5_000 + W + 1, at(0.0, 0.0))),
            Err(DetectorError::WindowExpired { .. })
        ));
        assert_eq!(d.state().det_events, before);
    }

    #[test]
    fn far_reports_pass_through_without_guessing() {
        let mut d = Detector::new(config(false), 0);
        let out = d.on_observation(&obs(0, 0, at(5000.0, 0.0))).unwrap();
        assert_eq!(out.verdict, Verdict::Pending);
        assert!(d.state().last_fix.is_empty());
    }

    #[test]
    fn extrapolation() {
        let cfg = config(true);
        let prev = Fix { t_us: 0, position: EnuPosition::ORIGIN, velocity: [10.0, 0.0, 0.0] };
        let far = EnuPosition::new(5000.0, 0.0, 0.0);
        let g = extrapolate_position(Some(&prev), &far, 2_000_000, [10.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(g, EnuPosition::new(20.0, 0.0, 0.0));
        let g = extrapolate_position(Some(&prev), &far, 1_000_000, [20.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(g, EnuPosition::new(15.0, 0.0, 0.0));
        let r = EnuPosition::new(3.0 * 235.0, 4.0 * 235.0, 0.0);
        let g = extrapolate_position(None, &r, 0, [0.0; 3], &cfg).unwrap();
        assert!((g.norm() - 705.0).abs() < 1e-9);
        assert!((g.x_m / g.y_m - 0.75).abs() < 1e-12);
        assert!(extrapolate_position(Some(&prev), &far, 0, [0.0; 3], &cfg).is_err());
    }

    #[test]
    fn guessing_replaces_unreliable_reports() {
        // Far-away second report; the extrapolated position is inside the zone.
        let mut d = Detector::new(config(true), 0);
        let mut o = obs(0, 0, at(702.0, 0.0));
        o.velocity = [-10.0, 0.0, 0.0];
        assert_eq!(d.on_observation(&o).unwrap().verdict, Verdict::Pending);
        let mut o2 = obs(1, 1_000_000, at(30_000.0, 0.0));
        o2.velocity = [-10.0, 0.0, 0.0];
        assert_eq!(d.on_observation(&o2).unwrap().verdict, Invasion);
        let fix = d.state().last_fix["p"];
        assert!((fix.position.x_m - 692.0).abs() < 1e-6);
    }

    #[test]
    fn replay_fires_deadlines() {
        let obs = vec![
            obs(0, 0, at(800.0, 0.0)),
            obs(1, 20_000_000, at(800.0, 0.0)),
            obs(2, 21_000_000, at(100.0, 0.0)),
        ];
        let r = replay(config(false), 0, obs, Some(60_000_000)).unwrap();
        let verdicts: Vec<_> = r.windows.iter().map(|w| (w.window_start_us, w.verdict)).collect();
        assert_eq!(
            verdicts,
            vec![
                (0, Verdict::NotInvasion),
                (20_000_000, Invasion),
                (35_000_000, Verdict::NotInvasion),
            ]
        );
    }
}

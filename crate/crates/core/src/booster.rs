//! Booster state machine: channel-hopping CAD eavesdropping, ACK watching,
//! the boost decision (byte-identical retransmission copy), and ACK relaying
//! with duplicate suppression.

use std::collections::{HashMap, HashSet};

use crate::frame::{decode_frame, get_attempt, FrameKind};
use crate::sim::{
    ack_fcnt_up, Action, EvKind, Outcome, Rate, Role, TimingPlan, TraceEvent, TraceKind, World,
};
use crate::{Error, Result};

/// Half-width of the retransmission watch window, seconds.
pub(crate) const RETX_GUARD_S: f64 = 0.05;

/// Consecutive unacknowledged boosts before the booster abandons a
/// transaction. A coherent boost almost always reaches the gateway, so a
/// genuinely new frame draws its ACK on the first boost; if no ACK appears
/// the gateway most likely acknowledged an attempt the booster never heard,
/// and further boosts only burn airtime it could spend covering other nodes.
pub(crate) const MAX_UNACKED_BOOSTS: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoosterPhase {
    /// Round-robin CAD over the uplink channels.
    Hopping,
    /// The booster's own class-A traffic is in flight.
    OwnTx,
    /// Locked onto a detected uplink, waiting for it to end.
    RxUplink,
    /// Listening through the tracked node's Rx1/Rx2 slots.
    WatchAck,
    /// No ACK observed: a boost copy is scheduled at the retry time.
    ArmedBoost,
    /// ACK captured: waiting to confirm the node retransmits before relaying.
    ArmedRelay,
    /// Locked onto the suspected retransmission.
    RxRetx,
    /// Relay copies are in flight in the node's receive slots.
    Relaying,
}

/// Uplink the booster is championing.
#[derive(Debug, Clone)]
pub struct StoredUplink {
    pub dev_addr: u32,
    pub fcnt: u16,
    pub attempt: u8,
    pub bytes: Vec<u8>,
    pub tx_end: f64,
    pub channel: usize,
}

#[derive(Debug)]
pub struct BoosterCtx {
    pub actor: usize,
    pub phase: BoosterPhase,
    pub gen: u64,
    pub cad_channel: usize,
    pub locked: usize,
    pub lock_t: f64,
    pub stored: Option<StoredUplink>,
    /// Latest observed `(fcnt_up, attempt)` per device.
    pub prev_observed: HashMap<u32, (u16, u8)>,
    /// Captured ACK bytes per device, keyed to the uplink counter they cover.
    pub acks: HashMap<u32, (u16, Vec<u8>)>,
    pub ack_seen: bool,
    /// ACK watch windows: (open, close, (channel, rate)).
    pub w1: (f64, f64, (usize, u8)),
    pub w2: (f64, f64, (usize, u8)),
    pub expect_t: f64,
    pub expect_channel: usize,
    pub watch_start: f64,
    pub relays_pending: u8,
    pub unacked_boosts: u8,
    /// Transactions given up on; never re-tracked.
    pub abandoned: HashSet<(u32, u16)>,
    pub cad_count: u64,
    pub cad_time: f64,
}

impl BoosterCtx {
    pub fn new(actor: usize, cad_channel: usize) -> Self {
        BoosterCtx {
            actor,
            phase: BoosterPhase::Hopping,
            gen: 0,
            cad_channel,
            locked: usize::MAX,
            lock_t: 0.0,
            stored: None,
            prev_observed: HashMap::new(),
            acks: HashMap::new(),
            ack_seen: false,
            w1: (0.0, 0.0, (0, 0)),
            w2: (0.0, 0.0, (0, 0)),
            expect_t: 0.0,
            expect_channel: 0,
            watch_start: 0.0,
            relays_pending: 0,
            unacked_boosts: 0,
            abandoned: HashSet::new(),
            cad_count: 0,
            cad_time: 0.0,
        }
    }
}

/// Boost iff the transaction is unacknowledged and attempts remain.
pub fn should_boost(ack_observed: bool, attempt: u8, max_attempts: u8) -> bool {
    !ack_observed && attempt < max_attempts
}

/// Relay iff an ACK is held and the latest two observations show the same
/// uplink counter with a higher attempt (the node evidently missed the ACK; a
/// new counter would mean it received it).
pub fn should_relay_ack(prev: (u16, u8), curr: (u16, u8), ack_captured: bool) -> bool {
    ack_captured && prev.0 == curr.0 && curr.1 > prev.1
}

/// When a tracked transaction's retransmission is due.
pub fn boost_time(stored_tx_end: f64, timing: &TimingPlan) -> f64 {
    timing.retry_time(stored_tx_end)
}

/// Channel of the tracked transaction's retransmission.
pub fn boost_channel(stored_channel: usize, n_uplink: usize) -> usize {
    (stored_channel + 1) % n_uplink
}

pub(crate) fn on_cad_tick(world: &mut World, actor: usize, gen: u64) {
    let b = match world.booster_index(actor) {
        Some(b) => b,
        None => return,
    };
    if world.boosters[b].phase != BoosterPhase::Hopping || world.boosters[b].gen != gen {
        return;
    }
    world.boosters[b].cad_count += 1;
    world.boosters[b].cad_time += world.cad_s;
    let channel = world.boosters[b].cad_channel;
    if let Some(tx_id) = world.cad_probe_hit(channel, actor) {
        let bc = &mut world.boosters[b];
        bc.phase = BoosterPhase::RxUplink;
        bc.gen += 1;
        bc.locked = tx_id;
        bc.lock_t = world.now;
        let tx = world.tx_meta(tx_id);
        let mut rec = TraceEvent::new(world.now, TraceKind::CadHit, actor, Role::Booster);
        rec.channel = Some(channel);
        rec.dev_addr = Some(tx.0);
        rec.fcnt = Some(tx.1);
        rec.attempt = Some(tx.2);
        rec.action = Some(Action::Cad);
        world.trace.push(rec);
    } else {
        // Each booster scans its own residue class of channels so concurrent
        // uplinks are picked up by different boosters instead of all of them
        // piling onto the first one.
        let stride = world.boosters.len();
        let n_up = world.plan.n_uplink;
        let bc = &mut world.boosters[b];
        bc.cad_channel = if bc.cad_channel + stride < n_up {
            bc.cad_channel + stride
        } else {
            b % n_up
        };
        if !world.traffic_done() {
            let t = world.now + world.cad_s;
            let gen = world.boosters[b].gen;
            world.push_booster_ev(t, b, EvKind::CadTick, gen);
        }
    }
}

/// Armed boosters lock onto uplinks starting in their retransmission watch.
pub(crate) fn on_uplink_tx_start(world: &mut World, tx_id: usize) {
    let (channel, rate, start, source) = world.tx_where(tx_id);
    if rate != Rate::Up as u8 {
        return;
    }
    for b in 0..world.boosters.len() {
        let bc = &world.boosters[b];
        if bc.phase == BoosterPhase::ArmedRelay
            && bc.actor != source
            && channel == bc.expect_channel
            && (start - bc.expect_t).abs() <= RETX_GUARD_S
        {
            let actor = bc.actor;
            let watched = world.now - bc.watch_start;
            emit_watch_record(world, b, bc.expect_channel, watched);
            let bc = &mut world.boosters[b];
            bc.phase = BoosterPhase::RxRetx;
            bc.gen += 1; // cancels the give-up timer
            bc.locked = tx_id;
            bc.lock_t = world.now;
            let _ = actor;
        }
    }
}

pub(crate) fn on_uplink_tx_end(world: &mut World, tx_id: usize) {
    for b in 0..world.boosters.len() {
        let bc = &world.boosters[b];
        if !matches!(bc.phase, BoosterPhase::RxUplink | BoosterPhase::RxRetx)
            || bc.locked != tx_id
        {
            continue;
        }
        let actor = bc.actor;
        let (dev, _fcnt, attempt) = world.tx_meta(tx_id);
        let salt = crate::sim::booster_salt(actor, dev, attempt);
        world.resolve_group(tx_id, actor, salt);
        let outcome = world.outcome(actor, tx_id).unwrap_or(Outcome::Lost);
        let duration = world.tx_end_time(tx_id) - world.boosters[b].lock_t;
        world.trace_rx(actor, tx_id, outcome, Some(Action::RxUplink), Some(duration));
        if outcome != Outcome::Delivered {
            to_hopping(world, b);
            continue;
        }
        let bytes = world.tx_bytes(tx_id);
        match decode_frame(&bytes, &crate::sim::NETWORK_KEY) {
            Ok(f) if matches!(f.kind, FrameKind::ConfirmedUp | FrameKind::UnconfirmedUp) => {
                handle_observed_uplink(world, b, tx_id, f.dev_addr, f.fcnt, get_attempt(&f));
            }
            _ => to_hopping(world, b),
        }
    }
}

fn handle_observed_uplink(
    world: &mut World,
    b: usize,
    tx_id: usize,
    dev: u32,
    fcnt: u16,
    attempt: u8,
) {
    let (tx_end, channel) = {
        let (c, _, _, _) = world.tx_where(tx_id);
        (world.tx_end_time(tx_id), c)
    };
    // Copies of the booster's own frames (boosts sent by peers) carry its
    // device address; it manages that transaction as a device, not here.
    if dev == world.booster_dev_addr(b) {
        return to_hopping(world, b);
    }
    if world.boosters[b].abandoned.contains(&(dev, fcnt)) {
        return to_hopping(world, b);
    }
    world.boosters[b].unacked_boosts = 0;
    let prev = world.boosters[b].prev_observed.insert(dev, (fcnt, attempt));
    // A held ACK for a superseded counter is dead weight.
    if world.boosters[b].acks.get(&dev).map(|(fc, _)| *fc != fcnt).unwrap_or(false) {
        world.boosters[b].acks.remove(&dev);
    }
    let ack_held = world.boosters[b].acks.contains_key(&dev);
    if let Some(prev) = prev {
        if should_relay_ack(prev, (fcnt, attempt), ack_held) {
            let ack_bytes = world.boosters[b].acks[&dev].1.clone();
            world.boosters[b].phase = BoosterPhase::Relaying;
            world.boosters[b].gen += 1;
            world.boosters[b].stored = None;
            world.schedule_relay(b, ack_bytes, tx_end, channel);
            return;
        }
    }
    watch_ack(world, b, dev, fcnt, attempt, tx_end, channel, world.tx_bytes(tx_id));
}

#[allow(clippy::too_many_arguments)]
fn watch_ack(
    world: &mut World,
    b: usize,
    dev: u32,
    fcnt: u16,
    attempt: u8,
    tx_end: f64,
    channel: usize,
    bytes: Vec<u8>,
) {
    let t1 = tx_end + world.timing.receive_delay1;
    let t2 = tx_end + world.timing.receive_delay2;
    let w1 = (t1, t1 + world.timing.rx1_window, (crate::sim::rx1_channel(channel, &world.plan), Rate::Up as u8));
    let w2 = (t2, t2 + world.timing.rx2_window, (world.plan.rx2_channel, Rate::Rx2 as u8));
    let bc = &mut world.boosters[b];
    bc.phase = BoosterPhase::WatchAck;
    bc.gen += 1;
    bc.locked = usize::MAX;
    bc.ack_seen = false;
    bc.stored = Some(StoredUplink { dev_addr: dev, fcnt, attempt, bytes, tx_end, channel });
    bc.w1 = w1;
    bc.w2 = w2;
    let gen = bc.gen;
    world.push_booster_ev(w2.1, b, EvKind::BoosterDecision, gen);
}

pub(crate) fn on_downlink_tx_end(world: &mut World, tx_id: usize) {
    let (channel, rate, start, _source) = world.tx_where(tx_id);
    for b in 0..world.boosters.len() {
        let bc = &world.boosters[b];
        if bc.phase != BoosterPhase::WatchAck {
            continue;
        }
        let slop = crate::sim::TIMING_SLOP_S;
        let in_w1 =
            bc.w1.2 == (channel, rate) && start >= bc.w1.0 - slop && start <= bc.w1.1 + slop;
        let in_w2 =
            bc.w2.2 == (channel, rate) && start >= bc.w2.0 - slop && start <= bc.w2.1 + slop;
        if !in_w1 && !in_w2 {
            continue;
        }
        let actor = bc.actor;
        let st = bc.stored.clone().expect("watching booster has a stored frame");
        let salt = crate::sim::booster_salt(actor, st.dev_addr, st.attempt);
        world.resolve_group(tx_id, actor, salt);
        let outcome = world.outcome(actor, tx_id).unwrap_or(Outcome::Lost);
        world.trace_rx(actor, tx_id, outcome, None, None);
        if outcome != Outcome::Delivered {
            continue;
        }
        let bytes = world.tx_bytes(tx_id);
        if let Ok(f) = decode_frame(&bytes, &crate::sim::NETWORK_KEY) {
            if f.kind == FrameKind::AckDown
                && f.dev_addr == st.dev_addr
                && ack_fcnt_up(&bytes) == st.fcnt
            {
                let bc = &mut world.boosters[b];
                bc.ack_seen = true;
                bc.acks.insert(st.dev_addr, (st.fcnt, bytes));
                // An Rx1 ACK settles the decision: skip the Rx2 watch so the
                // booster frees up sooner.
                if in_w1 {
                    bc.w2 = (world.now, world.now, bc.w2.2);
                    on_decision(world, b);
                }
            }
        }
    }
}

/// End of the tracked node's second receive window: boost, arm a relay, or
/// give the transaction up.
fn on_decision(world: &mut World, b: usize) {
    let st = match world.boosters[b].stored.clone() {
        Some(st) => st,
        None => return to_hopping(world, b),
    };
    // Account the two watch windows.
    let (d1, d2) = {
        let bc = &world.boosters[b];
        (bc.w1.1 - bc.w1.0, bc.w2.1 - bc.w2.0)
    };
    let (c1, c2) = (world.boosters[b].w1.2 .0, world.boosters[b].w2.2 .0);
    emit_watch_record(world, b, c1, d1);
    emit_watch_record(world, b, c2, d2);
    let max = world.cfg.max_attempts;
    // An ACK captured in an earlier cycle for this exact counter counts the
    // same as one seen in the watch just finished: the frame is acknowledged
    // and only the relay can still help the device.
    let ack_held = world.boosters[b]
        .acks
        .get(&st.dev_addr)
        .is_some_and(|(fc, _)| *fc == st.fcnt);
    if world.boosters[b].ack_seen || ack_held {
        if st.attempt >= max {
            return to_hopping(world, b);
        }
        let bc = &mut world.boosters[b];
        bc.phase = BoosterPhase::ArmedRelay;
        bc.gen += 1;
        bc.unacked_boosts = 0;
        bc.expect_t = boost_time(st.tx_end, &world.timing);
        bc.expect_channel = boost_channel(st.channel, world.plan.n_uplink);
        bc.watch_start = bc.expect_t - RETX_GUARD_S;
        let (t, gen) = (bc.expect_t + RETX_GUARD_S, bc.gen);
        world.push_booster_ev(t, b, EvKind::BoosterTimeout, gen);
    } else if should_boost(false, st.attempt, max)
        && world.boosters[b].unacked_boosts < MAX_UNACKED_BOOSTS
    {
        world.boosters[b].phase = BoosterPhase::ArmedBoost;
        world.boosters[b].gen += 1;
        world.boosters[b].unacked_boosts += 1;
        world.schedule_boost(b);
    } else {
        world.boosters[b].abandoned.insert((st.dev_addr, st.fcnt));
        to_hopping(world, b);
    }
}

/// The boost copy went out: it is now the latest observation of the
/// transaction, and the booster watches the (shifted) ACK slots again.
pub(crate) fn after_boost(world: &mut World, tx_id: usize) {
    let (channel, _, _, source) = world.tx_where(tx_id);
    let b = match world.booster_index(source) {
        Some(b) => b,
        None => return,
    };
    if world.boosters[b].phase != BoosterPhase::ArmedBoost {
        return;
    }
    let (dev, fcnt, attempt) = world.tx_meta(tx_id);
    let tx_end = world.tx_end_time(tx_id);
    world.boosters[b].prev_observed.insert(dev, (fcnt, attempt));
    watch_ack(world, b, dev, fcnt, attempt, tx_end, channel, world.tx_bytes(tx_id));
}

pub(crate) fn on_relay_tx_end(world: &mut World, source: usize) {
    let b = match world.booster_index(source) {
        Some(b) => b,
        None => return,
    };
    if world.boosters[b].phase != BoosterPhase::Relaying {
        return;
    }
    world.boosters[b].relays_pending = world.boosters[b].relays_pending.saturating_sub(1);
    if world.boosters[b].relays_pending == 0 {
        to_hopping(world, b);
    }
}

pub(crate) fn booster_on_event(
    world: &mut World,
    actor: usize,
    kind: EvKind,
    gen: u64,
) -> Result<()> {
    let b = world
        .booster_index(actor)
        .ok_or_else(|| Error::ProtocolViolation(format!("actor {actor} is not a booster")))?;
    if world.boosters[b].gen != gen {
        return Ok(()); // stale timer
    }
    match kind {
        EvKind::BoosterDecision if world.boosters[b].phase == BoosterPhase::WatchAck => {
            on_decision(world, b);
        }
        EvKind::BoosterTimeout if world.boosters[b].phase == BoosterPhase::ArmedRelay => {
            // No retransmission heard: the node evidently got the ACK.
            let c = world.boosters[b].expect_channel;
            emit_watch_record(world, b, c, 2.0 * RETX_GUARD_S);
            to_hopping(world, b);
        }
        EvKind::BoosterDecision | EvKind::BoosterTimeout => {}
        other => {
            return Err(Error::ProtocolViolation(format!(
                "booster {actor} cannot handle {other:?}"
            )))
        }
    }
    Ok(())
}

fn emit_watch_record(world: &mut World, b: usize, channel: usize, duration: f64) {
    let bc = &world.boosters[b];
    let actor = bc.actor;
    let (dev, fcnt) = bc
        .stored
        .as_ref()
        .map(|s| (Some(s.dev_addr), Some(s.fcnt)))
        .unwrap_or((None, None));
    let mut rec = TraceEvent::new(world.now, TraceKind::RxWindow, actor, Role::Booster);
    rec.channel = Some(channel);
    rec.dev_addr = dev;
    rec.fcnt = fcnt;
    rec.duration = Some(duration);
    rec.action = Some(Action::RxUplink);
    world.trace.push(rec);
}

/// Park the booster: resume its own traffic if any is queued, else hop.
pub(crate) fn to_hopping(world: &mut World, b: usize) {
    {
        let bc = &mut world.boosters[b];
        bc.phase = BoosterPhase::Hopping;
        bc.gen += 1;
        bc.locked = usize::MAX;
        bc.stored = None;
        bc.ack_seen = false;
    }
    let actor = world.boosters[b].actor;
    world.kick_own_traffic(actor);
    if world.boosters[b].phase == BoosterPhase::Hopping && !world.traffic_done() {
        let t = world.now + world.cad_s;
        let gen = world.boosters[b].gen;
        world.push_booster_ev(t, b, EvKind::CadTick, gen);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;

    #[test]
    fn boost_decision_table() {
        assert!(should_boost(false, 3, 8));
        assert!(!should_boost(true, 3, 8));
        assert!(!should_boost(false, 8, 8));
        assert!(should_boost(false, 7, 8));
    }

    #[test]
    fn relay_decision_table() {
        assert!(should_relay_ack((10, 2), (10, 3), true));
        assert!(!should_relay_ack((10, 2), (11, 1), true));
        assert!(!should_relay_ack((10, 3), (10, 3), true));
        assert!(!should_relay_ack((10, 2), (10, 3), false));
    }

    #[test]
    fn boost_timing_matches_retry_arithmetic() {
        let cfg = ScenarioConfig::default();
        let timing = TimingPlan::from_config(&cfg);
        let tx_end = 123.456;
        let expect = tx_end
            + timing.receive_delay2
            + timing.rx2_window
            + timing.tau;
        assert!((boost_time(tx_end, &timing) - expect).abs() < 1e-12);
        assert_eq!(boost_channel(2, 8), 3);
        assert_eq!(boost_channel(7, 8), 0);
    }
}

//! Scenario configuration for network runs: flat key/value TOML with
//! defaults, validation, and verbatim echo support.

use serde::{Deserialize, Serialize};

use crate::css::RadioConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Plain class-A confirmed uplinks.
    Lorawan,
    /// Class-A plus booster nodes that re-transmit coherently and relay ACKs.
    Lorain,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Lorawan => write!(f, "lorawan"),
            Protocol::Lorain => write!(f, "lorain"),
        }
    }
}

/// Power draw of the radio in each state, in milliwatts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyProfile {
    pub tx_mw: f64,
    pub rx_mw: f64,
    pub cad_mw: f64,
}

impl Default for EnergyProfile {
    fn default() -> Self {
        // SX127x-class figures: +14 dBm PA, active receiver.
        EnergyProfile { tx_mw: 350.0, rx_mw: 44.0, cad_mw: 2.0 }
    }
}

mod seed_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(*v as i64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        Ok(i64::deserialize(d)? as u64)
    }
}

/// One simulated deployment. All fields have defaults; files only override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Label copied into metrics rows.
    pub scenario: String,
    pub protocol: Protocol,
    pub nodes: u32,
    /// Fraction of nodes acting as boosters (lorain only); the booster count
    /// is `ceil(fraction * nodes)`.
    pub booster_fraction: f64,
    pub packets_per_node: u32,
    pub send_interval_s: f64,
    pub payload_bytes: usize,
    /// Stored bit-cast as a signed integer in TOML (which has no u64), so
    /// seeds above `i64::MAX` appear negative in config files.
    #[serde(with = "seed_serde")]
    pub seed: u64,

    // Radio
    pub sf: u8,
    pub bw_hz: u32,
    pub rx2_sf: u8,
    pub rx2_bw_hz: u32,
    pub n_uplink_channels: u8,
    pub n_downlink_channels: u8,

    // Class-A timing
    pub receive_delay1_s: f64,
    /// Receive window length in preamble symbol periods.
    pub rx_window_symbols: f64,
    /// Guard added to the Rx2 ACK airtime to form the retry offset tau.
    pub ack_guard_s: f64,
    pub max_attempts: u8,
    /// Re-enqueue a packet under a fresh counter after all attempts fail.
    pub resubmit_failed: bool,

    // Geometry and link model
    pub area_radius_m: f64,
    pub path_loss_exponent: f64,
    /// Path loss at the 1 m reference distance, dB.
    pub path_loss_ref_db: f64,
    pub node_tx_power_dbm: f64,
    pub gateway_tx_power_dbm: f64,
    pub noise_floor_dbm: f64,
    pub capture_threshold_db: f64,
    pub jitter_ns: f64,
    pub base_delivery_uplink: f64,
    pub base_delivery_downlink: f64,
    pub base_delivery_peer: f64,

    pub energy: EnergyProfile,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: "default".into(),
            protocol: Protocol::Lorawan,
            nodes: 20,
            booster_fraction: 0.15,
            packets_per_node: 40,
            send_interval_s: 240.0,
            payload_bytes: 30,
            seed: 1,
            sf: 10,
            bw_hz: 125_000,
            rx2_sf: 10,
            rx2_bw_hz: 500_000,
            n_uplink_channels: 8,
            n_downlink_channels: 8,
            receive_delay1_s: 1.0,
            rx_window_symbols: 6.0,
            ack_guard_s: 0.05,
            max_attempts: 8,
            resubmit_failed: false,
            area_radius_m: 8.0,
            path_loss_exponent: 2.7,
            path_loss_ref_db: 40.0,
            node_tx_power_dbm: 14.0,
            gateway_tx_power_dbm: 20.0,
            noise_floor_dbm: -120.0,
            capture_threshold_db: 1.0,
            jitter_ns: 1000.0,
            base_delivery_uplink: 0.64,
            base_delivery_downlink: 0.72,
            base_delivery_peer: 0.95,
            energy: EnergyProfile::default(),
        }
    }
}

impl ScenarioConfig {
    /// Second receive slot opens one second after the first.
    pub fn receive_delay2_s(&self) -> f64 {
        self.receive_delay1_s + 1.0
    }

    pub fn uplink_radio(&self) -> RadioConfig {
        let mut cfg = RadioConfig::new(self.sf, self.bw_hz).expect("validated");
        cfg.cr_denominator = 5;
        cfg
    }

    pub fn rx2_radio(&self) -> RadioConfig {
        RadioConfig::new(self.rx2_sf, self.rx2_bw_hz).expect("validated")
    }

    /// Number of booster devices for this protocol.
    pub fn booster_count(&self) -> u32 {
        match self.protocol {
            Protocol::Lorawan => 0,
            Protocol::Lorain => (self.booster_fraction * self.nodes as f64).ceil() as u32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        RadioConfig::new(self.sf, self.bw_hz)
            .and_then(|_| RadioConfig::new(self.rx2_sf, self.rx2_bw_hz))
            .map_err(|e| Error::Config(e.to_string()))?;
        let checks: [(bool, &str); 12] = [
            (self.nodes >= 1, "nodes must be >= 1"),
            (
                (0.0..=1.0).contains(&self.booster_fraction),
                "booster_fraction must be in [0, 1]",
            ),
            (self.booster_count() <= self.nodes, "booster count exceeds nodes"),
            (self.packets_per_node >= 1, "packets_per_node must be >= 1"),
            (self.send_interval_s > 0.0, "send_interval_s must be > 0"),
            (self.n_uplink_channels >= 1, "need at least one uplink channel"),
            (self.n_downlink_channels >= 1, "need at least one downlink channel"),
            ((1..=8).contains(&self.max_attempts), "max_attempts must be in 1..=8"),
            (self.receive_delay1_s > 0.0, "receive_delay1_s must be > 0"),
            (self.area_radius_m > 0.0, "area_radius_m must be > 0"),
            (
                [self.base_delivery_uplink, self.base_delivery_downlink, self.base_delivery_peer]
                    .iter()
                    .all(|p| (0.0..=1.0).contains(p)),
                "base delivery probabilities must be in [0, 1]",
            ),
            (self.jitter_ns >= 0.0, "jitter_ns must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let cfg = ScenarioConfig::from_toml_str(
            "nodes = 5\nprotocol = \"lorain\"\nbooster_fraction = 0.2\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.nodes, 5);
        assert_eq!(cfg.protocol, Protocol::Lorain);
        assert_eq!(cfg.booster_count(), 1);
        let echoed = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn booster_count_rounds_up_and_lorawan_has_none() {
        let mut cfg = ScenarioConfig { nodes: 20, booster_fraction: 0.15, ..Default::default() };
        cfg.protocol = Protocol::Lorain;
        assert_eq!(cfg.booster_count(), 3);
        cfg.protocol = Protocol::Lorawan;
        assert_eq!(cfg.booster_count(), 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        for text in [
            "nodes = 0",
            "booster_fraction = 1.5",
            "sf = 6",
            "bw_hz = 100",
            "max_attempts = 9",
            "base_delivery_uplink = 1.2",
            "unknown_key = 1",
        ] {
            assert!(ScenarioConfig::from_toml_str(text).is_err(), "{text} accepted");
        }
    }
}

//! Geolocation and time attestation for usage control.
//!
//! A data provider only lets a TEE-hosted processor release results after a
//! mesh of attested reference nodes has bounded the processor's location by
//! minimum round-trip times and the bounded region lies inside the agreed
//! geofence during the agreed time window.

pub mod analysis;
pub mod channel;
pub mod crypto;
pub mod geoclient;
pub mod geosolve;
pub mod model;
pub mod net;
pub mod parties;
pub mod probe;
pub mod sim;
pub mod wire;

//! Real sockets on 127.0.0.1: three GeoClient daemons, a provider and a
//! processor session.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dgate::net::{run_processor_session, serve_provider_session, spawn_geoclient, spawn_responder, Deployment, TcpConnector};
use dgate::parties::ReleaseDecision;
use dgate::probe::{ProbeSettings, UdpTransport};

const DEPLOYMENT: &str = include_str!("../../../deploy/loopback.toml");

#[test]
fn loopback_deployment_releases() {
    let mut d = Deployment::from_toml(DEPLOYMENT).unwrap();
    d.constraints.repetitions = 50;

    let mut services = Vec::new();
    for i in 0..d.geoclients.len() {
        let name = d.geoclients[i].name.clone();
        let gc = Arc::new(d.geoclient(&name).unwrap());
        let (responder, control) =
            spawn_geoclient(gc, "127.0.0.1:0", "127.0.0.1:0", Vec::new(), ProbeSettings::default()).unwrap();
        d.geoclients[i].probe = responder.addr.to_string();
        d.geoclients[i].control = control.addr.to_string();
        services.push(responder);
        services.push(control);
    }
    let proc_responder = spawn_responder("127.0.0.1:0").unwrap();
    d.processor.probe = proc_responder.addr.to_string();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let provider_addr = listener.local_addr().unwrap();
    let mut provider = d.provider_state().unwrap();
    let provider_thread = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        serve_provider_session(&mut provider, stream)
    });

    let mut processor = d.processor_state();
    let mut transport = UdpTransport::bind("127.0.0.1:0").unwrap();
    let mut connector = TcpConnector { connect_timeout: Duration::from_secs(2), io_timeout: Duration::from_secs(30) };
    let mut sink: Vec<Vec<u8>> = Vec::new();
    let decisions =
        run_processor_session(&mut processor, provider_addr, &mut transport, &mut connector, &mut sink).unwrap();
    let reviews = provider_thread.join().unwrap().unwrap();

    assert_eq!(decisions, vec![ReleaseDecision::Allow; 2], "{reviews:?}");
    assert_eq!(reviews.len(), 2);
    assert!(reviews.iter().all(|r| r.error.is_none()), "{reviews:?}");
    assert_eq!(sink.len(), 2);
    let round = processor.last_round().unwrap();
    assert_eq!(round.accepted.len(), 3);

    proc_responder.stop();
    for s in services {
        s.stop();
    }
}

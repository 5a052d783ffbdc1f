//! Built-in scenarios: the three-machine radial case and a ten-machine meshed
//! case with two forced oscillations.

use super::scenario::{ForcingChannel, ForcingSpec, GeneratorRecord, NoiseSpec, SimScenario};
use crate::dynamics::{Branch, Bus, BusKind, GeneratorParams, ModelOrder, Network};

fn flux(h: f64, d: f64, xd: f64, xdp: f64, xq: f64, td0: f64, ka: f64, ta: f64) -> GeneratorParams {
    GeneratorParams {
        model: ModelOrder::FluxDecay3,
        h,
        d,
        xd,
        xd_prime: xdp,
        xq,
        td0_prime: td0,
        e_prime: 0.0,
        ka,
        ta,
    }
}

fn classical(h: f64, d: f64, xdp: f64) -> GeneratorParams {
    GeneratorParams {
        model: ModelOrder::Classical2,
        h,
        d,
        xd: 0.0,
        xd_prime: xdp,
        xq: 0.0,
        td0_prime: 0.0,
        // replaced by the value the power flow implies
        e_prime: 1.0,
        ka: 0.0,
        ta: 0.0,
    }
}

fn bus(name: &str, kind: BusKind, v: f64, p_gen: f64, p_load: f64, q_load: f64) -> Bus {
    Bus {
        name: name.into(),
        kind,
        v,
        theta: 0.0,
        p_gen,
        p_load,
        q_load,
    }
}

fn line(from: usize, to: usize, r: f64, x: f64) -> Branch {
    Branch { from, to, r, x, b: 0.0 }
}

/// Three flux-decay machines with AVRs, each tied radially to an infinite bus
/// carrying white noise; torque forcing at 0.5 Hz, 5% on the second machine.
pub fn four_bus(seed: u64) -> SimScenario {
    let network = Network {
        buses: vec![
            bus("inf", BusKind::Slack, 1.0, 0.0, 0.0, 0.0),
            bus("b1", BusKind::Pv, 1.02, 0.6, 0.0, 0.0),
            bus("b2", BusKind::Pv, 1.01, 0.8, 0.0, 0.0),
            bus("b3", BusKind::Pv, 1.03, 0.7, 0.0, 0.0),
        ],
        branches: vec![line(0, 1, 0.01, 0.12), line(0, 2, 0.01, 0.10), line(0, 3, 0.015, 0.15)],
    };
    let generators = vec![
        GeneratorRecord {
            name: "G1".into(),
            bus: 1,
            params: flux(3.5, 2.0, 1.2, 0.30, 0.90, 6.0, 40.0, 0.20),
        },
        GeneratorRecord {
            name: "G2".into(),
            bus: 2,
            params: flux(4.5, 1.5, 1.5, 0.25, 1.10, 5.0, 50.0, 0.10),
        },
        GeneratorRecord {
            name: "G3".into(),
            bus: 3,
            params: flux(3.0, 2.5, 1.0, 0.22, 0.70, 7.0, 30.0, 0.15),
        },
    ];
    SimScenario {
        name: "four_bus".into(),
        network,
        generators,
        forcings: vec![ForcingSpec {
            generator: 1,
            channel: ForcingChannel::Torque,
            amplitude: 0.05,
            freq_hz: 0.5,
        }],
        noise: NoiseSpec::default(),
        duration: 120.0,
        dt: 1e-3,
        fs: 20.0,
        warmup: 30.0,
        seed,
    }
}

/// Ten machines (six classical, four flux-decay with AVR) around a meshed load
/// ring with OU load noise. Torque forcing at 0.70 Hz on G4 and AVR reference
/// forcing at 0.86 Hz on G8. The 100 s window puts both tones within 0.05 bin
/// of the grid.
pub fn ten_gen(seed: u64) -> SimScenario {
    // bus 0 infinite, 1..=10 generators, 11..=14 load ring
    let mut buses = vec![bus("inf", BusKind::Slack, 1.0, 0.0, 0.0, 0.0)];
    let dispatch = [0.5, 0.7, 0.6, 0.8, 0.4, 0.9, 0.5, 0.7, 0.6, 0.5];
    let vset = [1.02, 1.01, 1.03, 1.02, 1.0, 1.02, 1.01, 1.03, 1.02, 1.01];
    for g in 0..10 {
        buses.push(bus(&format!("g{}", g + 1), BusKind::Pv, vset[g], dispatch[g], 0.0, 0.0));
    }
    let loads = [(1.6, 0.4), (1.4, 0.3), (1.8, 0.5), (1.2, 0.3)];
    for (l, &(p, q)) in loads.iter().enumerate() {
        buses.push(bus(&format!("l{}", l + 1), BusKind::Pq, 1.0, 0.0, p, q));
    }
    let mut branches = Vec::new();
    for g in 0..10 {
        let x = 0.10 + 0.01 * (g % 4) as f64;
        branches.push(line(g + 1, 11 + g % 4, 0.005, x));
    }
    for l in 0..4 {
        branches.push(line(11 + l, 11 + (l + 1) % 4, 0.01, 0.08));
    }
    branches.push(line(0, 11, 0.005, 0.05));
    branches.push(line(0, 13, 0.005, 0.06));
    let params = [
        classical(4.0, 2.0, 0.30),
        classical(5.0, 1.5, 0.25),
        classical(3.5, 2.5, 0.28),
        classical(4.5, 2.0, 0.32),
        classical(3.0, 1.8, 0.35),
        classical(6.0, 2.2, 0.22),
        flux(3.5, 2.0, 1.2, 0.30, 0.90, 6.0, 40.0, 0.20),
        flux(4.5, 1.5, 1.5, 0.25, 1.10, 5.0, 50.0, 0.10),
        flux(3.0, 2.5, 1.0, 0.22, 0.70, 7.0, 30.0, 0.15),
        flux(5.0, 2.0, 1.3, 0.28, 0.95, 6.5, 45.0, 0.12),
    ];
    let generators = params
        .into_iter()
        .enumerate()
        .map(|(g, p)| GeneratorRecord {
            name: format!("G{}", g + 1),
            bus: g + 1,
            params: p,
        })
        .collect();
    SimScenario {
        name: "ten_gen".into(),
        network: Network { buses, branches },
        generators,
        forcings: vec![
            ForcingSpec {
                generator: 3,
                channel: ForcingChannel::Torque,
                amplitude: 0.02,
                freq_hz: 0.70,
            },
            ForcingSpec {
                generator: 7,
                channel: ForcingChannel::AvrRef,
                amplitude: 0.003,
                freq_hz: 0.86,
            },
        ],
        noise: NoiseSpec::default(),
        duration: 100.0,
        dt: 1e-3,
        fs: 20.0,
        warmup: 30.0,
        seed,
    }
}

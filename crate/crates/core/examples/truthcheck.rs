use swmrs_core::sim::{true_estimands, Scenario, ScenarioConfig};

fn main() {
    for (label, scenario) in [("C1", Scenario::C1), ("C2", Scenario::C2), ("C3", Scenario::C3), ("B1", Scenario::B1), ("B3", Scenario::B3)] {
        let cfg = ScenarioConfig::new(scenario).with_superpop(100_000);
        let t = true_estimands(&cfg).unwrap();
        println!("{label}: tau = {:?}", t.psi_tau);
        println!("      se  = {:?}", t.se);
    }
}

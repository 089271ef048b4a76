use compartment::datagen::{build_toy, NoiseSpec, SchemeChoice, ToySpec, STRONG_K, WEAK_K, Z_TRUE};
use compartment::graph::edge_count;
use compartment::mesh::Role;

#[test]
fn full_toy_structure() {
    let toy = build_toy(&ToySpec::full()).unwrap();
    assert_eq!(toy.mesh.layer_counts(), vec![117, 359, 170, 170, 1]);
    assert_eq!(toy.mesh.len(), 817);
    assert_eq!(toy.mesh.source_indices().len(), 60);
    assert_eq!(toy.observed.len(), 42);
    assert!(toy.observed.contains(&toy.mesh.ambient_index()));
    for choice in [SchemeChoice::Weak, SchemeChoice::Strong] {
        let ops = toy.ops(choice);
        // decoupled device-layer pairs and couplings into ambient carry no edge
        assert_eq!(ops.m(), 4814);
        assert!(ops.m() < edge_count(&toy.mesh));
        assert_eq!(ops.n(), 817);
        assert_eq!(ops.n_z(), 1);
    }
    assert_eq!(toy.ops(SchemeChoice::Weak).n_k(), WEAK_K.len());
    assert_eq!(toy.ops(SchemeChoice::Strong).n_k(), STRONG_K.len());
    toy.mesh.validate().unwrap();
}

#[test]
fn full_toy_roles() {
    let toy = build_toy(&ToySpec::full()).unwrap();
    let count = |role: Role| toy.mesh.compartments().iter().filter(|c| c.role == role).count();
    assert_eq!(count(Role::Ambient), 1);
    assert!(count(Role::Igbt) > 0 && count(Role::Diode) > 0 && count(Role::Rectifier) > 0);
    for i in toy.mesh.source_indices() {
        assert!(toy.mesh.compartment(i).role.is_active_device());
    }
}

#[test]
fn reduced_toy_keeps_the_sharing_classes() {
    let full = build_toy(&ToySpec::full()).unwrap();
    let reduced = build_toy(&ToySpec::reduced()).unwrap();
    for choice in [SchemeChoice::Weak, SchemeChoice::Strong] {
        assert_eq!(full.scheme(choice).k_names, reduced.scheme(choice).k_names);
        assert_eq!(full.true_theta(choice), reduced.true_theta(choice));
    }
    assert_eq!(reduced.true_theta(SchemeChoice::Strong).z, vec![Z_TRUE]);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let toy = build_toy(&ToySpec::reduced()).unwrap();
    let noise = NoiseSpec::Aat { sigma2: 1e-4 };
    let a = toy.generate(SchemeChoice::Weak, noise, 200, 17).unwrap();
    let b = toy.generate(SchemeChoice::Weak, noise, 200, 17).unwrap();
    let c = toy.generate(SchemeChoice::Weak, noise, 200, 18).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
    assert_eq!(a.observations.nrows(), toy.observed.len());
}

#[test]
fn heating_rises_above_ambient() {
    let toy = build_toy(&ToySpec::reduced()).unwrap();
    let traj = toy.generate(SchemeChoice::Strong, NoiseSpec::None, 6000, 0).unwrap();
    let amb = toy.mesh.ambient_index();
    let rise = traj.states.max() - toy.spec.ambient;
    assert!(rise > 10.0, "rise {rise}");
    assert!(traj.states.row(amb).iter().all(|&v| v == toy.spec.ambient));
}

use nefele_core::workload::{generate, trace_bytes, AdmissionMode, Normal, WorkloadSpec};

fn spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        seed,
        duration_s: 30.0,
        arrival_rate: 20.0,
        tasks_per_request: Normal { mean: 10.0, std: 3.0 },
        task_duration_s: Normal { mean: 2.0, std: 0.5 },
        task_cpu_mc: Normal { mean: 4000.0, std: 500.0 },
        task_mem_bytes: Normal { mean: 1e9, std: 1e8 },
        admission: AdmissionMode::RoundRobin,
        admission_node: 1,
        background_load: 0.25,
        executable: "/bin/sleep".into(),
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = trace_bytes(&generate(&spec(2024)).unwrap());
    let b = trace_bytes(&generate(&spec(2024)).unwrap());
    assert!(a.len() > 1000);
    assert_eq!(a, b);
}

#[test]
fn different_seed_differs() {
    let a = trace_bytes(&generate(&spec(1)).unwrap());
    let b = trace_bytes(&generate(&spec(2)).unwrap());
    assert_ne!(a, b);
}

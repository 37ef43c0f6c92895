use ringweave::runtime::local_ring;
use ringweave::timeline::{
    check_balanced, merge_rank_traces, parse_chrome_trace, pids, Category, Phase,
};
use ringweave::{Error, ReduceOp, Runtime, Tensor};

#[test]
fn four_rank_traces_merge_into_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let ring = local_ring(4).unwrap();
    let plans: Vec<usize> = std::thread::scope(|s| {
        let hs: Vec<_> = ring
            .into_iter()
            .map(|(mut cfg, l)| {
                cfg.timeline = Some(dir.path().join(format!("trace.rank{}", cfg.rank)));
                s.spawn(move || {
                    let rt = Runtime::init_with_listener(cfg, l)?;
                    let r = rt.rank() as f32;
                    // One fused group, one broadcast, one standalone allreduce.
                    let group = (0..5).map(|i| Tensor::new(format!("g{i}"), vec![r; 16]).unwrap()).collect();
                    for t in rt.submit_allreduce_group(group, ReduceOp::Sum)? {
                        t.wait()?;
                    }
                    rt.broadcast(Tensor::new("w", vec![r as f64; 4])?, 1)?;
                    rt.allreduce(Tensor::new("solo", vec![1i64; 3])?, ReduceOp::Sum)?;
                    rt.shutdown()?;
                    Ok::<_, Error>(rt.plan_log().len())
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap().unwrap()).collect()
    });

    let inputs: Vec<_> = (0..4).map(|r| dir.path().join(format!("trace.rank{r}"))).collect();
    let merged = dir.path().join("timeline.json");
    let count = merge_rank_traces(&inputs, &merged).unwrap();

    let raw = std::fs::read_to_string(&merged).unwrap();
    let as_json: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert!(as_json.is_array());
    let events = parse_chrome_trace(&raw).unwrap();
    assert_eq!(events.len(), count);
    check_balanced(&events).unwrap();
    assert_eq!(pids(&events).into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);

    for (rank, plan_count) in plans.iter().enumerate() {
        assert_eq!(*plan_count, 3);
        let mine: Vec<_> = events.iter().filter(|e| e.pid == rank as u32).collect();
        let spans = |cat| mine.iter().filter(|e| e.category == cat && e.phase == Phase::Begin).count();
        assert_eq!(spans(Category::Communicate), *plan_count);
        assert_eq!(spans(Category::Broadcast), 1);
        assert_eq!(spans(Category::MemcpyInFusionBuffer), 2);
        assert_eq!(spans(Category::MemcpyOutFusionBuffer), 2);
        assert!(spans(Category::Negotiate) >= 1);
        assert!(mine.windows(2).all(|w| w[0].timestamp_us <= w[1].timestamp_us));
        assert!(mine.iter().all(|e| e.tid == 0));
    }

    // The fused plan shows the copy-in, communicate, copy-out pipeline in order.
    let fused: Vec<_> = events
        .iter()
        .filter(|e| e.pid == 0 && e.name.starts_with("fused[5]"))
        .map(|e| (e.category, e.phase))
        .collect();
    assert_eq!(
        fused,
        vec![
            (Category::MemcpyInFusionBuffer, Phase::Begin),
            (Category::MemcpyInFusionBuffer, Phase::End),
            (Category::Communicate, Phase::Begin),
            (Category::Communicate, Phase::End),
            (Category::MemcpyOutFusionBuffer, Phase::Begin),
            (Category::MemcpyOutFusionBuffer, Phase::End),
        ]
    );
}

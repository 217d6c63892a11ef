use lrn::checkpoint::Checkpoint;
use lrn::engine::Parallel;
use lrn_core::tasks::TaskId;
use lrn_core::training::{evaluate, train, Sequential, TaskData, TrainConfig};
use lrn_core::CellKind;

#[test]
fn reloaded_model_evaluates_bit_identically() {
    for (task, kind) in [(TaskId::Adding, CellKind::Olrn), (TaskId::Copy, CellKind::Elman), (TaskId::ToySent, CellKind::Glrn)] {
        let mut c = TrainConfig::new(task, kind);
        c.d = 10;
        c.layers = 2;
        c.batch = 4;
        c.max_steps = 5;
        c.eval_size = 16;
        c.seq_len = 12;
        let o = train(&c, None, &Parallel, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint { task: Some(task), model: o.model.clone() }.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.task, Some(task));
        assert_eq!(back.model, o.model);
        let set = TaskData::new(&c, None).unwrap().eval_set().unwrap();
        let a = evaluate(&o.model, task, &set, &Sequential).unwrap();
        let b = evaluate(&back.model, task, &set, &Sequential).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.metric.to_bits(), b.metric.to_bits());
    }
}

#[test]
fn parallel_and_sequential_training_agree() {
    let mut c = TrainConfig::new(TaskId::Adding, CellKind::Lrn);
    c.d = 8;
    c.batch = 6;
    c.max_steps = 4;
    c.seq_len = 10;
    c.eval_size = 8;
    let a = train(&c, None, &Parallel, |_| {}).unwrap();
    let b = train(&c, None, &Sequential, |_| {}).unwrap();
    assert_eq!(a.model, b.model);
}

use prodcat::autodiff::{ParamStore, Tensor};
use prodcat::checkpoint::{round_to_stored, Checkpoint};
use prodcat::corpus::{clean, load_csv, stratified_split, write_raw_csv, ColumnMap, SplitSpec};
use prodcat::embedding_io::{build_matrix, read_embeddings};
use prodcat::exec::Exec;
use prodcat::losses_metrics::f1_macro;
use prodcat::models::{set_embeddings, LstmLayer, Model, ModelConfig};
use prodcat::synthetic;
use prodcat::textnorm::NormConfig;
use prodcat::train::{
    history_csv, predict_batch, prepare, retrain, train, Classifier, Prediction, Prepared, TrainConfig,
};

const MAX_LEN: usize = 10;

fn values(p: &ParamStore) -> Vec<(String, Tensor)> {
    p.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

fn setup() -> (Prepared, prodcat::corpus::Corpus) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    write_raw_csv(&synthetic::records(400, 3), &path, &ColumnMap::default(), b';').unwrap();
    let raw = load_csv(&path, &ColumnMap::default(), b';').unwrap();
    assert!(raw.rejected.is_empty());
    let (c, _) = clean(&raw.records, "raw.csv", &NormConfig::default(), Exec::Parallel);
    let s = stratified_split(&c, &SplitSpec::default()).unwrap();
    (prepare(&s.train, &s.val, 500, MAX_LEN).unwrap(), s.test)
}

fn model(p: &Prepared, seed: u64) -> Model {
    let mut cfg = ModelConfig::bilstm(p.vocab.len(), p.labels.sizes());
    cfg.embed_dim = 8;
    cfg.max_len = MAX_LEN;
    cfg.lstm_layers = vec![LstmLayer { units: 8, dropout: 0.1 }];
    Model::new(cfg, seed).unwrap()
}

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::bilstm();
    cfg.optimizer.lr = 0.02;
    cfg.batch_size = 16;
    cfg.max_epochs = 8;
    cfg.patience = 3;
    cfg
}

#[test]
fn train_save_load_evaluate_predict() {
    let (p, test) = setup();
    let out = train(model(&p, 1), &p.train, &p.val, &config()).unwrap();
    assert!(out.divergence.is_none());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::new(out.model, NormConfig::default(), p.labels.clone(), &p.vocab, 1);
    ck.save(&path, &p.vocab).unwrap();

    let clf = Classifier::load(&path, None).unwrap();
    assert_eq!(values(&clf.checkpoint.model.params), values(&round_to_stored(&ck.model.params)));
    let report = clf.evaluate(&test, Exec::Parallel).unwrap();
    assert!(report.mean_macro_f1 > 0.9, "{}", report.mean_macro_f1);
    assert_eq!(report.to_json(), clf.evaluate(&test, Exec::Sequential).unwrap().to_json());

    // The report agrees with f1_macro on the dumped predictions.
    let data = clf.dataset(&test).unwrap();
    let preds = predict_batch(&clf.checkpoint.model, &data.ids, Exec::Sequential).unwrap();
    for h in 0..4 {
        let truth: Vec<usize> = data.targets.iter().map(|t| t[h]).collect();
        let pred: Vec<usize> = preds[h].iter().map(|x| x.0).collect();
        let f = f1_macro(&truth, &pred, p.labels.sizes()[h]);
        assert_eq!(f, report.heads[h].macro_f1);
    }

    let rec = &test.records()[0];
    match clf.predict(rec.item_text.as_str()).unwrap() {
        Prediction::Classified { heads, .. } => {
            assert_eq!(heads.len(), 4);
            assert!(heads.iter().all(|h| h.probability > 0.0 && h.probability <= 1.0));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(clf.predict("").unwrap(), Prediction::Unclassifiable { .. }));
    assert!(matches!(clf.predict(" ... !!").unwrap(), Prediction::Unclassifiable { .. }));
}

#[test]
fn same_seed_same_bytes() {
    let (p, _) = setup();
    let run = |exec| {
        let mut cfg = config();
        cfg.exec = exec;
        let out = train(model(&p, 4), &p.train, &p.val, &cfg).unwrap();
        let ck = Checkpoint::new(out.model, NormConfig::default(), p.labels.clone(), &p.vocab, 4);
        (ck.to_bytes(), history_csv(&out.history))
    };
    let a = run(Exec::Parallel);
    assert_eq!(a, run(Exec::Parallel));
    assert_eq!(a, run(Exec::Sequential));
}

#[test]
fn early_stopping_returns_the_best_epoch_weights() {
    let (p, _) = setup();
    let mut cfg = config();
    cfg.max_epochs = 30;
    cfg.patience = 2;
    let out = train(model(&p, 2), &p.train, &p.val, &cfg).unwrap();
    let best = out.best_epoch.unwrap();
    let h = &out.history;
    let top = h.iter().map(|r| r.val_mean).fold(f64::MIN, f64::max);
    assert_eq!(h.iter().position(|r| r.val_mean == top).unwrap() + 1, best);
    if out.stopped_early {
        assert_eq!(h.len(), best + cfg.patience);
    }
    // Replaying the same number of epochs reproduces the returned weights.
    let (replayed, _) = retrain(model(&p, 2), &p.train, best, &cfg).unwrap();
    assert_eq!(values(&replayed.params), values(&out.model.params));
}

#[test]
fn pretrained_embeddings_seed_the_table() {
    let (p, _) = setup();
    let text = "3 2\nleite 0.1 0.2\niogurte 0.3 0.4\nnaoexiste 1 1\n";
    let table = read_embeddings(text.as_bytes()).unwrap();
    let m = build_matrix(&table, &p.vocab, 9);
    assert_eq!(m.found, 2);
    let mut cfg = ModelConfig::bilstm(p.vocab.len(), p.labels.sizes());
    cfg.embed_dim = 2;
    cfg.lstm_layers = vec![LstmLayer { units: 2, dropout: 0.0 }];
    let mut model = Model::new(cfg, 0).unwrap();
    set_embeddings(&mut model.params, m.weights).unwrap();
    let emb = model.params.by_name("emb").unwrap();
    assert_eq!(emb.row(p.vocab.id("leite")), [0.1, 0.2]);
}

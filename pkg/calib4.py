import sys, time, torch, numpy as np
from sedt.data import generate_scene, ClipExample, EventTemplate, SyntheticSceneSpec, weaken, default_scene_spec
from sedt.features import log_mel, FeatureConfig, compute_normalization_stats, normalize
from sedt.model import ModelConfig, BackboneStage
from sedt.losses import LossWeights
from sedt.matching import FineTuneConfig
from sedt.training import TrainConfig, train_stage, evaluate_model, evaluate_checkpoint, LEARNING, FINETUNE, count_decoded_events
from sedt.postprocess import DecisionConfig

def scene_spec(seed=7):
    base = default_scene_spec()
    return SyntheticSceneSpec(
        templates=tuple(EventTemplate(t.label, t.kind, (1.0, 2.0), t.freq_range_hz, t.chirp_down)
                        for t in base.templates),
        events_per_clip=(1, 2), snr_db=(10., 25.), clip_len_s=5.0, sample_rate=16000, seed=seed)

FCFG = FeatureConfig(hop=320)
BACKBONE = (BackboneStage(32), BackboneStage(64), BackboneStage(128), BackboneStage(256, stride_t=1))

def build_examples(spec, indices, weak=False):
    out = []
    for i in indices:
        wav, ann = generate_scene(spec, i)
        if weak:
            ann = weaken(ann)
        out.append(ClipExample(log_mel(wav, FCFG), ann))
    return out

def norm_all(examples):
    stats = compute_normalization_stats([e.features for e in examples])
    return [ClipExample(normalize(e.features, stats), e.annotation) for e in examples], stats

def model_config(k):
    return ModelConfig(n_classes=k, dropout=0.0, boundary_head_layers=3, backbone=BACKBONE)

def probe_weak():
    spec = scene_spec(seed=21)
    vocab = spec.vocabulary()
    strong = build_examples(spec, range(40))
    weak = build_examples(spec, range(40, 80), weak=True)
    examples, _ = norm_all(strong + weak)
    weak_examples = examples[40:]
    cfg = TrainConfig(batch_size=8, epochs_learning=100, lr_learning=3e-4,
                      epochs_drop=80, seed=0, num_threads=2, val_every=1000,
                      weights=LossWeights(empty_class_weight=0.1))
    t0 = time.time()
    ckpt = train_stage(LEARNING, cfg, model_config(vocab.size), vocab, examples)
    model = ckpt.build_model()
    _, _, at = evaluate_model(model, weak_examples, vocab, DecisionConfig(fusion=None))
    print(f"WEAK: tag F1 on weak subset = {at.macro_f1:.3f} ({time.time()-t0:.0f}s)", flush=True)

def probe_finetune():
    spec = scene_spec(seed=7)
    vocab = spec.vocabulary()
    train, stats = norm_all(build_examples(spec, range(50)))
    held = [ClipExample(normalize(e.features, stats), e.annotation)
            for e in build_examples(spec, range(50, 70))]
    cfg = TrainConfig(batch_size=8, epochs_learning=200, epochs_finetune=50,
                      lr_learning=3e-4, lr_finetune=3e-5, epochs_drop=160,
                      seed=0, num_threads=2, val_every=1000,
                      weights=LossWeights(empty_class_weight=0.1),
                      finetune=FineTuneConfig(epsilon=1.0, alpha=1.0, seed=0))
    t0 = time.time()
    base = train_stage(LEARNING, cfg, model_config(vocab.size), vocab, train)
    eb, sb, at = evaluate_checkpoint(base, train)
    print(f"FT: learning stage train Eb={eb.macro_f1:.3f} Sb={sb.macro_f1:.3f} At={at.macro_f1:.3f} ({time.time()-t0:.0f}s)", flush=True)
    raw = DecisionConfig(fusion=None, de_overlap=False)
    before = count_decoded_events(base, held, raw)
    cfg2 = TrainConfig(batch_size=8, epochs_learning=200, epochs_finetune=50,
                       lr_learning=3e-4, lr_finetune=3e-5, epochs_drop=None,
                       seed=0, num_threads=2, val_every=1000,
                       weights=LossWeights(empty_class_weight=0.1),
                       finetune=FineTuneConfig(epsilon=1.0, alpha=1.0, seed=0))
    ft = train_stage(FINETUNE, cfg2, base.model_config, vocab, train, init=base)
    after = count_decoded_events(ft, held, raw)
    eb2, _, _ = evaluate_checkpoint(ft, held)
    print(f"FT: decoded on held-out before={before} after={after}; held Eb after FT={eb2.macro_f1:.3f} ({time.time()-t0:.0f}s)", flush=True)

if __name__ == "__main__":
    if sys.argv[1] == "H":
        probe_weak()
    else:
        probe_finetune()

import sys, time, torch
from sedt.data import default_scene_spec, generate_scene, ClipExample, make_batches, EventTemplate, SyntheticSceneSpec
from sedt.features import log_mel, FeatureConfig, compute_normalization_stats, normalize
from sedt.model import ModelConfig, SoundEventTransformer
from sedt.losses import LossWeights, mixed_batch_loss
from sedt.training import evaluate_model, lr_schedule
from sedt.postprocess import DecisionConfig

torch.set_num_threads(2)

def make_data(snr, dur, n=50):
    base = default_scene_spec()
    scene = SyntheticSceneSpec(
        templates=tuple(EventTemplate(t.label, t.kind, dur, t.freq_range_hz, t.chirp_down)
                        for t in base.templates),
        events_per_clip=(1, 3), snr_db=snr, clip_len_s=5.0, sample_rate=16000, seed=7)
    vocab = scene.vocabulary()
    fcfg = FeatureConfig(hop=320)
    ex = []
    for i in range(n):
        wav, ann = generate_scene(scene, i)
        ex.append(ClipExample(log_mel(wav, fcfg), ann))
    stats = compute_normalization_stats([e.features for e in ex])
    return [ClipExample(normalize(e.features, stats), e.annotation) for e in ex], vocab

def run(name, ecw, lr, drop, snr=(6., 20.), dur=(0.5, 1.5), epochs=200, bs=16):
    examples, vocab = make_data(snr, dur)
    mc = ModelConfig(n_classes=vocab.size, dropout=0.0)
    torch.manual_seed(0)
    model = SoundEventTransformer(mc)
    w = LossWeights(empty_class_weight=ecw)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    t0 = time.time()
    for epoch in range(epochs):
        eta = lr_schedule(epoch, lr, drop)
        for g in opt.param_groups:
            g["lr"] = eta
        model.train()
        for b in make_batches(examples, bs, shuffle_seed=[0, 0, epoch]):
            out = model(b.specs, b.pad_mask)
            loss, bd = mixed_batch_loss(out, b.annotations, vocab, w)
            opt.zero_grad(); loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 0.1)
            opt.step()
        if (epoch + 1) % 50 == 0:
            model.eval()
            eb, sb, at = evaluate_model(model, examples, vocab, DecisionConfig(fusion=None))
            print(f"{name} ep{epoch}: Eb={eb.macro_f1:.3f} Sb={sb.macro_f1:.3f} "
                  f"At={at.macro_f1:.3f} ({time.time()-t0:.0f}s)", flush=True)

if __name__ == "__main__":
    which = sys.argv[1]
    if which == "A":
        run("A ecw0.1 lr3e-4", 0.1, 3e-4, 150)
    elif which == "B":
        run("B ecw1.0 lr5e-4", 1.0, 5e-4, 150)
    elif which == "C":
        run("C ecw0.1 lr5e-4 easy", 0.1, 5e-4, 150, snr=(12., 25.), dur=(0.6, 1.2))

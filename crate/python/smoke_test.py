"""Smoke test for the multitok extension module.

Build and install first:

    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import multitok


def corpus_text():
    words = ["ab", "ba", "abc", "cab", "a", "b", "c"]
    lines = []
    for i in range(200):
        n = 3 + i % 4
        lines.append(" ".join(words[(i * 7 + j * 3 + i // 5) % len(words)] for j in range(n)))
    return "\n".join(lines) + "\n"


def main():
    text = corpus_text()
    vocab = multitok.Vocab(text, "byte")
    assert vocab.size == len(set(text.encode())), vocab
    assert vocab.decode(vocab.encode("abc")) == "abc"
    seqs = vocab.encode_lines(text, 64)
    train, valid = multitok.split_corpus(seqs, 0.9, seed=3)
    assert len(train) + len(valid) == len(seqs)

    model = multitok.Model(vocab.size, d_model=16, stem_layers=1, heads=3, context_len=32, attn_heads=2, seed=1)
    before = model.head_losses(valid)
    for loss in before:
        assert abs(loss - math.log(vocab.size)) < 1.0, before
    report = model.train(train, valid, steps=60, batch_size=8, lr_b=3e-3, lr_m=1e-2, lr_mb=3e-4, seed=1)
    assert len(report["losses"]) == 60
    after = model.head_losses(valid)
    assert after[0] < before[0], (before, after)

    masks = [multitok.Mask.build(train, order, vocab.size, floor=0.5) for order in (2, 3)]
    assert masks[0].order == 2 and len(masks[0]) > 0
    clone = multitok.Mask.from_bytes(masks[0].to_bytes())
    assert len(clone) == len(masks[0])

    prompt = vocab.encode("ab")
    ids, trace = multitok.generate(model, prompt, 40, masks, epsilon_b=0.0, seed=5)
    assert len(ids) == 40
    # the final step is capped by the remaining budget
    assert all(s[0] == 3 for s in trace["steps"][:-1]), trace["steps"]
    ids1, trace1 = multitok.generate(model, prompt, 40, masks, epsilon_b=1.0, seed=5)
    assert trace1["speedup"] == 1.0 and trace1["forward_passes"] == 40
    again, _ = multitok.generate(model, prompt, 40, masks, epsilon_b=0.0, seed=5)
    assert again == ids, "same seed must give the same output"
    print("sample:", repr(vocab.decode(prompt + ids)))

    ppl1 = model.ppl_n(valid, 1)
    dyn = multitok.ppl_dynamic(model, valid, masks, epsilon_b=1.0)
    assert dyn["ppl_d"] == ppl1 and dyn["mix"] == [1.0, 0.0, 0.0], (dyn, ppl1)
    joint = model.ppl_joint(valid, 3)
    assert math.isfinite(joint) and joint > 1.0

    rows, csv = multitok.sweep(model, valid, "0:1:0.5", masks)
    assert [r[0] for r in rows] == [0.0, 0.5, 1.0]
    assert csv.splitlines()[0] == "epsilon_b,ppl_d,speedup,mix1,mix2,mix3"
    assert all(1.0 <= r[2] <= 3.0 for r in rows)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.bin")
        model.save(path, vocab)
        loaded, v2 = model.load(path)
        assert v2 is not None and v2.size == vocab.size
        # weights are stored as f32
        assert abs(loaded.ppl_n(valid, 1) - ppl1) < 1e-4 * ppl1
        masks[1].save(os.path.join(d, "m3.mask"))
        assert len(multitok.Mask.load(os.path.join(d, "m3.mask"))) == len(masks[1])
        try:
            multitok.Model.load(os.path.join(d, "missing.bin"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

    base = multitok.Model(vocab.size, d_model=16, stem_layers=1, heads=1, context_len=32, attn_heads=2, seed=2)
    ext = multitok.Model.from_base(base, 3, copy_init=False, seed=0)
    assert ext.n_heads == 3 and ext.ppl_n(valid, 1) == base.ppl_n(valid, 1)

    kernel = multitok.gaussian_kernel(5)
    assert abs(sum(kernel) - 1.0) < 1e-12
    assert multitok.otsu_threshold([0.0, 0.01, 0.02, 0.9, 1.0]) < 0.9
    passed, max_tv = multitok.ot_check(trials=5, vocab=3, seed=1)
    assert passed and max_tv < 1e-6

    try:
        multitok.generate(model, prompt, 5, masks, epsilon_b=2.0)
    except ValueError:
        pass
    else:
        raise AssertionError("epsilon_b outside [0, 1] should raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Pilot: glyph dataset design + accuracy-drop pattern (not part of the package)."""
import sys
import time

import numpy as np

GLYPHS = {
    0: [((.5, .1), (.9, .5)), ((.9, .5), (.5, .9)), ((.5, .9), (.1, .5)), ((.1, .5), (.5, .1))],
    1: [((.5, .1), (.5, .9)), ((.1, .5), (.9, .5))],
    2: [((.1, .1), (.9, .9)), ((.9, .1), (.1, .9))],
    3: [((.2, .1), (.2, .9)), ((.2, .9), (.9, .9))],
    4: [((.1, .1), (.9, .1)), ((.5, .1), (.5, .9))],
    5: [((.1, .1), (.9, .1)), ((.9, .1), (.1, .9)), ((.1, .9), (.9, .9))],
    6: [((.1, .1), (.1, .9)), ((.1, .9), (.9, .9)), ((.9, .9), (.9, .1))],
    7: [((.5, .1), (.9, .9)), ((.9, .9), (.1, .9)), ((.1, .9), (.5, .1))],
    8: [((.15, .1), (.15, .9)), ((.85, .1), (.85, .9)), ((.15, .5), (.85, .5))],
    9: [((.15, .15), (.85, .15)), ((.85, .15), (.85, .85)), ((.85, .85), (.15, .85)), ((.15, .85), (.15, .15))],
}


def glyph_mask(cls, rng, size=32):
    box = rng.uniform(18, 24)
    ox = rng.uniform(2, size - box - 2)
    oy = rng.uniform(2, size - box - 2)
    mask = np.zeros((size, size), dtype=bool)
    for (x0, y0), (x1, y1) in GLYPHS[cls]:
        steps = 60
        xs = (ox + (x0 + (x1 - x0) * np.linspace(0, 1, steps)) * box).astype(int)
        ys = (oy + (y0 + (y1 - y0) * np.linspace(0, 1, steps)) * box).astype(int)
        mask[np.clip(ys, 0, size - 1), np.clip(xs, 0, size - 1)] = True
    # dilate to ~3px strokes
    d = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            d |= np.roll(np.roll(mask, dy, 0), dx, 1)
    return d


def render(cls, rng, size=32, amp=46):
    coarse = (rng.integers(0, 2, (size // 2, size // 2)) * 2 - 1).astype(np.float64)
    bg = np.kron(coarse, np.ones((2, 2)))
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy + xx) % 2 * 2 - 1).astype(np.float64)
    m = glyph_mask(cls, rng, size)
    tex = np.where(m, checker, bg) * amp
    img = np.zeros((size, size, 3))
    gains = rng.uniform(0.8, 1.2, 3)
    for ch in range(3):
        img[:, :, ch] = 128 + tex * gains[ch] + rng.uniform(-8, 8, (size, size))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_split(seed, per_class_train, per_class_test, classes=10):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in range(classes):
        for _ in range(per_class_train):
            train.append((render(cls, rng), cls))
        for _ in range(per_class_test):
            test.append((render(cls, rng), cls))
    return train, test


def train_cnn(train, test, seed=0, epochs=5, lr=1e-3, batch=64):
    import torch
    import torch.nn as nn

    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    x = torch.tensor(np.stack([t[0] for t in train]).transpose(0, 3, 1, 2), dtype=torch.float32) / 255
    y = torch.tensor([t[1] for t in train])
    xt = torch.tensor(np.stack([t[0] for t in test]).transpose(0, 3, 1, 2), dtype=torch.float32) / 255
    yt = torch.tensor([t[1] for t in test])
    model = nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(), nn.Linear(32 * 8 * 8, 10),
    )
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    order_rng = np.random.default_rng(seed)
    for ep in range(epochs):
        idx = order_rng.permutation(len(x))
        for s in range(0, len(x), batch):
            b = torch.tensor(idx[s:s + batch])
            opt.zero_grad()
            loss = loss_fn(model(x[b]), y[b])
            loss.backward()
            opt.step()
    with torch.no_grad():
        train_acc = (model(x).argmax(1) == y).float().mean().item()
        test_acc = (model(xt).argmax(1) == yt).float().mean().item()
    return train_acc, test_acc


def main():
    per_train = int(sys.argv[1]) if len(sys.argv) > 1 else 60
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 5
    import dsguard as dg
    from dsguard.dataset import DatasetRecord, protect_dataset, restore_dataset
    from dsguard.fsp import PerturbConfig
    from dsguard.rit import RitParams

    t0 = time.time()
    train, test = make_split(77, per_train, 15)
    print(f"dataset: {len(train)} train / {len(test)} test  ({time.time()-t0:.1f}s)")

    records = [DatasetRecord(index=i, label=lbl, image=img) for i, (img, lbl) in enumerate(train)]
    key = dg.KeyRecord.generate()
    t0 = time.time()
    protected, manifest = protect_dataset(records, key, RitParams(), PerturbConfig())
    t_prot = time.time() - t0
    restored, failures = restore_dataset(protected, manifest, key)
    assert not failures
    print(f"protect: {t_prot:.1f}s ({t_prot/len(records)*1000:.0f} ms/img)")
    import dsguard
    ps = [dsguard.psnr(r.image, records[r.index].image) for r in restored]
    print(f"recovered PSNR median {np.median(ps):.1f}")

    variants = {
        "clean": [(r.image, r.label) for r in records],
        "protected": [(r.image, r.label) for r in protected],
        "recovered": [(r.image, r.label) for r in restored],
    }
    for name, data in variants.items():
        t0 = time.time()
        tr, te = train_cnn(data, test, seed=0, epochs=epochs)
        print(f"{name:10s} train {tr*100:5.1f}%  test {te*100:5.1f}%   ({time.time()-t0:.0f}s)")


if __name__ == "__main__":
    main()

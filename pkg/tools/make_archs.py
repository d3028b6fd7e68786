"""Regenerate the layer-spec files under src/adaptmerge/archs/."""
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "adaptmerge" / "archs"


def adapter(lines, name, c, ratio=4):
    lines += [f"conv name={name}.down in={c} out={c // ratio} k=1 bias=1",
              "relu",
              f"conv name={name}.up in={c // ratio} out={c} k=1 bias=1",
              f"add name={name}.out with={name}.in"]


def resnet18(with_adapters=False, classes=1000):
    lines = ["# ResNet-18, ImageNet layout (input 3x224x224)" + (", 1x1 bottleneck adapter after every basic block" if with_adapters else ""),
             "conv name=conv1 in=3 out=64 k=7 s=2 p=3",
             "relu",
             "pool name=maxpool k=3 s=2 p=1"]
    prev, c_in = "maxpool", 64
    for stage, c in enumerate((64, 128, 256, 512), start=1):
        for b in range(2):
            s = 2 if (stage > 1 and b == 0) else 1
            n = f"layer{stage}.{b}"
            lines += [f"conv name={n}.conv1 in={c_in} out={c} k=3 s={s} p=1 from={prev}",
                      "relu",
                      f"conv name={n}.conv2 in={c} out={c} k=3 s=1 p=1"]
            if s != 1 or c_in != c:
                lines += [f"conv name={n}.down in={c_in} out={c} k=1 s={s} from={prev}",
                          f"add name={n}.sum with={n}.conv2"]
            else:
                lines += [f"add name={n}.sum with={prev}"]
            lines += [f"relu name={n}.in" if with_adapters else f"relu name={n}.out"]
            if with_adapters:
                adapter(lines, n, c)
            prev, c_in = f"{n}.out", c
    lines += ["gap", f"linear name=fc in=512 out={classes} bias=1"]
    return "\n".join(lines) + "\n"


def desk(with_adapters=False, in_ch=1, channels=(16, 32, 64, 128), classes=10):
    lines = [f"# desk backbone: 4 x (3x3 conv -> relu -> 2x2 max-pool), input {in_ch}x32x32"
             + (", adapter on every block output" if with_adapters else "")]
    c_in = in_ch
    for j, c in enumerate(channels, start=1):
        lines += [f"conv name=block{j}.conv in={c_in} out={c} k=3 s=1 p=1 bias=1", "relu",
                  f"pool name=block{j}.{'in' if with_adapters else 'out'} k=2 s=2"]
        if with_adapters:
            adapter(lines, f"block{j}", c)
        c_in = c
    lines += ["gap", f"linear name=head in={channels[-1]} out={classes} bias=1"]
    return "\n".join(lines) + "\n"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    files = {
        "resnet18": resnet18(),
        "resnet18_adapters": resnet18(with_adapters=True),
        "desk_backbone": desk(),
        "desk_backbone_adapters": desk(with_adapters=True),
        "unit_conv": "# single 1x1 conv on a 1x1x1 input\nconv in=1 out=1 k=1\n",
    }
    for name, text in files.items():
        (OUT / f"{name}.arch").write_text(text)


if __name__ == "__main__":
    main()

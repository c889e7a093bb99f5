"""From synthetic phantoms to a predicted mask, using the command line tool.

The run trains the default network for eight short epochs on 120 phantoms,
a few minutes on one core. The full desk-scale schedule lives in
`experiments/default.ini`.
"""

import sys
import tempfile
from pathlib import Path

from famseg.cli import main

SHORT = """\
# default network, shortened schedule
[schedule]
phases = adamw:6:cosine, sgd:2:cosine
batch_size = 8
"""


def run(*args):
    print("\n$ famseg", " ".join(args))
    code = main(list(args))
    if code:
        sys.exit(code)


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    data, out = tmp / "data", tmp / "run"
    (tmp / "short.ini").write_text(SHORT)

    # 120 phantoms: a thin bright bar (femur), an elliptical ring (cranium), or both, under speckle.
    run("gen", "--out", str(data), "--n", "120", "--seed", "0")
    run("train", "--config", str(tmp / "short.ini"), "--data", str(data), "--out", str(out))
    run("eval", "--ckpt", str(out / "best.ck"), "--data", str(data), "--split", "test")
    run("infer", "--ckpt", str(out / "best.ck"), "--image", str(data / "images" / "00000.png"),
        "--out", str(tmp / "pred.png"), "--palette")
    print("\nfiles written:", sorted(p.name for p in tmp.iterdir()))

"""Convert PNG/JPEG/... images to binary PGM and write a manifest.

Usage: python scripts/to_pgm.py <src dir> <out dir> <modality>

<src dir> must contain one sub-directory per label.  Needs Pillow, which the
fedmeta package itself does not depend on.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from fedmeta.data_io import ManifestEntry, write_manifest, write_pgm


def main(src, out, modality):
    src, out = Path(src), Path(out)
    entries = []
    for label_dir in sorted(p for p in src.iterdir() if p.is_dir()):
        for img_path in sorted(label_dir.iterdir()):
            try:
                img = np.asarray(Image.open(img_path).convert("L"), dtype=np.uint8)
            except OSError:
                continue
            target = out / label_dir.name / (img_path.stem + ".pgm")
            target.parent.mkdir(parents=True, exist_ok=True)
            write_pgm(target, img)
            entries.append(ManifestEntry(str(target.resolve()), label_dir.name, modality))
    write_manifest(out / "manifest.tsv", entries)
    print(f"wrote {len(entries)} images to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])

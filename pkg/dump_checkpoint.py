import sys

import numpy as np

from network import read_checkpoint
from store import read_manifest


def dump(path):
    """Print a checkpoint's metadata and tensor manifest."""
    _, metadata = read_checkpoint(path)
    manifest = read_manifest(path)
    print(f"stage:         {metadata.stage}")
    print(f"epochs:        {metadata.epochs}")
    print(f"iterations:    {metadata.iterations}")
    print(f"seed:          {metadata.seed}")
    print(f"created_at:    {metadata.created_at}")
    print(f"config_digest: {metadata.config_digest or '-'}")
    print(f"init_from:     {metadata.init_from or '-'}")
    print("lineage:       " + (" -> ".join(f"{e.stage}@{e.epochs}" for e in metadata.lineage) or "-"))
    print(f"model:         {metadata.model.model_dump(mode='json')}")
    total = sum(int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest)
    print(f"tensors:       {len(manifest)} ({total} values)")
    for entry in manifest:
        print(f"  {entry['name']:<60} {entry['dtype']:<8} {tuple(entry['shape'])}")


if __name__ == '__main__':
    if len(sys.argv) < 2:
        print('usage: dump_checkpoint.py <checkpoint>')
        sys.exit(2)
    dump(sys.argv[1])

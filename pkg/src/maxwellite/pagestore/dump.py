"""``maxwellite-dump``: print the header, table list and tree statistics of a
database file without modifying it."""
from __future__ import annotations

import argparse
import json
import sys

from .btree import BTree
from .format import PAGE_SIZE, FileHeader, InternalPage, PageKind, unseal
from .store import Store, StoreConfig


def tree_stats(tree: BTree) -> dict:
    levels: dict[int, int] = {}
    fill = []
    stack = [(tree.desc.index_root, 1)]
    while stack:
        pid, depth = stack.pop()
        node = tree.cache.get(pid)
        levels[depth] = levels.get(depth, 0) + 1
        fill.append(node.used / PAGE_SIZE)
        if isinstance(node, InternalPage):
            stack.extend((c, depth + 1) for c in node.children)
    return {
        "height": tree.desc.height,
        "nodes_per_level": [levels[d] for d in sorted(levels)],
        "avg_fill": round(sum(fill) / len(fill), 3) if fill else 0.0,
    }


def describe(path: str, verify: bool = False) -> dict:
    with open(path, "rb") as f:
        raw = f.read(PAGE_SIZE)
    header = FileHeader.decode(raw)
    info = {
        "path": path,
        "header": {
            "magic": header.magic.decode(errors="replace").rstrip("\x00"),
            "format_version": header.format_version,
            "page_size": header.page_size,
            "page_count": header.page_count,
            "table_list_head": header.table_list_head,
            "free_list_head": header.free_list_head,
            "free_pages": header.free_count,
            "clean": bool(header.clean),
            "flush_epoch": header.flush_epoch,
        },
    }
    unseal(0, raw)
    store = Store.open(path, StoreConfig(create_if_missing=False, on_unclean="verify"))
    try:
        tables = []
        for name in store.tables():
            t = store.tables_by_name[name]
            tables.append({
                "name": name,
                "page_id": t.desc.page_id,
                "schema": [(c.name, c.type.name) for c in t.desc.schema.columns],
                "row_count": t.desc.row_count,
                "index_root": t.desc.index_root,
                "tree": tree_stats(t.tree),
            })
        info["tables"] = tables
        if verify:
            bad = store.verify_checksums()
            info["checksum_failures"] = bad
            kinds: dict[str, int] = {}
            for pid in range(1, header.page_count):
                page = store.file.read_at(pid * PAGE_SIZE, PAGE_SIZE)
                kind = PageKind(page[4]).name if len(page) == PAGE_SIZE else "MISSING"
                kinds[kind] = kinds.get(kind, 0) + 1
            info["pages_by_kind"] = kinds
    finally:
        store.abandon()
    return info


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="maxwellite-dump", description=__doc__)
    ap.add_argument("path")
    ap.add_argument("--verify", action="store_true", help="checksum every page and count page kinds")
    ap.add_argument("--json", action="store_true", help="machine-readable output")
    args = ap.parse_args(argv)
    try:
        info = describe(args.path, args.verify)
    except Exception as e:  # report any open failure as a CLI error
        print(f"maxwellite-dump: {e}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(info, indent=2))
        return 0
    h = info["header"]
    print(f"{info['path']}: {h['magic']} v{h['format_version']} page_size={h['page_size']} "
          f"pages={h['page_count']} free={h['free_pages']} clean={h['clean']} epoch={h['flush_epoch']}")
    for t in info["tables"]:
        cols = ", ".join(f"{n}:{ty}" for n, ty in t["schema"])
        tr = t["tree"]
        print(f"  table {t['name']} @{t['page_id']} rows={t['row_count']} root={t['index_root']} "
              f"height={tr['height']} nodes/level={tr['nodes_per_level']} fill={tr['avg_fill']}  [{cols}]")
    if "checksum_failures" in info:
        print(f"  checksum failures: {info['checksum_failures'] or 'none'}")
        print(f"  pages by kind: {info['pages_by_kind']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

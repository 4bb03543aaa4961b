"""Command line: extract dataset features and emit a matcher manifest."""

from __future__ import annotations

import json
from pathlib import Path

import click

from .backbone import load_backbone
from .datasets import build_pfpascal_manifest, build_spair_manifest, build_tss_manifest
from .extract import extract_to_file


@click.group()
def cli():
    """Feature extraction for the transport matcher."""


@cli.command("extract")
@click.option("--dataset", type=click.Choice(["spair", "pf-pascal", "tss"]),
              required=True)
@click.option("--root", "root_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--resolution", type=int, default=840, show_default=True)
@click.option("--model", default="vitb14", show_default=True,
              help="Backbone: a hub variant or 'stub[:seed]' for offline runs.")
@click.option("--split", default=None,
              help="SPair split (trn/val/test); default builds every split.")
@click.option("--sym-pairs", "sym_pairs_path", type=click.Path(exists=True),
              default=None,
              help="JSON table {category: [[i, j], ...]} of symmetric "
                   "keypoint index pairs (SPair only).")
@click.option("--limit", type=int, default=None,
              help="Only extract the first N pairs (smoke runs).")
def extract_cmd(dataset, root_dir, out_dir, resolution, model, split,
                sym_pairs_path, limit):
    """Walk a dataset root, extract every referenced image, and write FMAP
    files plus manifest.json into the output directory."""
    if dataset == "spair":
        table = None
        if sym_pairs_path:
            table = json.loads(Path(sym_pairs_path).read_text())
        manifest, images = build_spair_manifest(
            root_dir, split=split or "all", sym_pairs_table=table
        )
    elif dataset == "pf-pascal":
        manifest, images = build_pfpascal_manifest(root_dir)
    else:
        manifest, images = build_tss_manifest(root_dir, resolution=resolution)

    if limit is not None:
        manifest["pairs"] = manifest["pairs"][:limit]
        keep = {p["source_fmap"] for p in manifest["pairs"]}
        keep |= {p["target_fmap"] for p in manifest["pairs"]}
        images = {k: v for k, v in images.items() if k in keep}

    backbone = load_backbone(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (fmap_name, image_path) in enumerate(sorted(images.items())):
        extract_to_file(image_path, out / fmap_name, backbone, resolution)
        if (i + 1) % 50 == 0:
            click.echo(f"extracted {i + 1}/{len(images)} images")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    click.echo(
        f"wrote {len(images)} feature files and manifest.json "
        f"({len(manifest['pairs'])} pairs) to {out}"
    )


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Generate the code reference pages."""
import logging
from pathlib import Path

import mkdocs_gen_files

logger = logging.getLogger("mkdocs")

nav = mkdocs_gen_files.Nav()

project_path = "./tiny_nodule_detector/"

for path in sorted(Path(project_path).rglob("*.py")):
    module_path = path.relative_to(project_path).with_suffix("")
    doc_path = path.relative_to(project_path).with_suffix(".md")
    full_doc_path = Path("reference", doc_path)

    parts = list(module_path.parts)
    if parts[-1] == "__init__":
        parts = parts[:-1]
        doc_path = doc_path.with_name("index.md")
        full_doc_path = full_doc_path.with_name("index.md")
    elif parts[-1] == "__main__":
        continue

    logger.debug(f"{path} -> {full_doc_path}")

    nav[["tiny_nodule_detector"] + parts] = doc_path.as_posix()
    with mkdocs_gen_files.open(full_doc_path, "w") as fd:
        print("::: " + ".".join(["tiny_nodule_detector"] + parts), file=fd)

    mkdocs_gen_files.set_edit_path(full_doc_path, path)

with mkdocs_gen_files.open("reference/SUMMARY.md", "w") as nav_file:
    nav_file.writelines(nav.build_literate_nav())

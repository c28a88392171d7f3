import contextlib
import io
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from hier_align.log import current_log_path, info, log_line, set_log_path


class HierAlignLogTests(unittest.TestCase):
    def tearDown(self) -> None:
        set_log_path(None)

    def test_lines_go_to_the_run_log(self) -> None:
        with tempfile.TemporaryDirectory() as td:
            run_log = Path(td) / "run" / "run.log"
            fallback = Path(td) / "fallback.log"
            set_log_path(run_log)
            self.assertEqual(current_log_path(), run_log)
            with mock.patch("hier_align.log.FALLBACK_LOG_PATH", fallback):
                log_line("first")
                with contextlib.redirect_stdout(io.StringIO()):
                    info("second")
            self.assertEqual(run_log.read_text(encoding="utf-8"), "first\n[INFO] second\n")
            self.assertFalse(fallback.exists())

    def test_without_a_run_log_lines_go_to_the_fallback(self) -> None:
        set_log_path(None)
        with tempfile.TemporaryDirectory() as td:
            fallback = Path(td) / "hier_align.log"
            with mock.patch("hier_align.log.FALLBACK_LOG_PATH", fallback):
                log_line("kept")
            self.assertEqual(fallback.read_text(encoding="utf-8"), "kept\n")

    def test_unwritable_run_log_falls_back(self) -> None:
        with tempfile.TemporaryDirectory() as td:
            blocker = Path(td) / "not_a_dir"
            blocker.write_text("", encoding="utf-8")
            fallback = Path(td) / "hier_align.log"
            set_log_path(blocker / "run.log")
            with mock.patch("hier_align.log.FALLBACK_LOG_PATH", fallback):
                log_line("rescued")
            self.assertEqual(fallback.read_text(encoding="utf-8"), "rescued\n")


if __name__ == "__main__":
    unittest.main()

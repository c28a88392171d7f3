from hier_align.cli import dispatch


if __name__ == "__main__":
    dispatch()

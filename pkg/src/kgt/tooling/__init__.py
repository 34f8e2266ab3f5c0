from kgt.tooling.config import Config, parse_config
from kgt.tooling.pgm import GrayImage, encode_pgm, parse_pgm, read_pgm, write_pgm

__all__ = ["Config", "GrayImage", "encode_pgm", "parse_config", "parse_pgm", "read_pgm",
           "write_pgm"]

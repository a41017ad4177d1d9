from dotenv import load_dotenv

load_dotenv()

__all__ = ["__version__"]

__version__ = "0.1.0"

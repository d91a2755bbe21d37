from app import corpus, create_app
from app.bbv import VM, Limits, execute
from app.frontend import parse_source
from app.ir import lower

app = create_app()


@app.shell_context_processor
def make_shell_context() -> dict:
    """Returns symbols that can be used in the shell context when running
    'flask shell'.
    """
    return {
        "corpus": corpus,
        "parse_source": parse_source,
        "lower": lower,
        "execute": execute,
        "VM": VM,
        "Limits": Limits,
    }

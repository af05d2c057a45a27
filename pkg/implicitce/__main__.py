from implicitce.main import app

app(prog_name="implicitce")

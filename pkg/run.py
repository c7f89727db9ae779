import os

from flask_cors import CORS

from imop import create_app

app = create_app()
# LP and spreadsheet downloads carry their file name in Content-Disposition
CORS(app, resources={r"/api/*": {"origins": "*"}}, expose_headers=["Content-Disposition"])

if __name__ == "__main__":
    app.run(debug=os.environ.get("FLASK_DEBUG") == "1", port=int(os.environ.get("PORT", "5000")))
